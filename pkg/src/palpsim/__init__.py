"""palpsim: visuo-haptic liver palpation trainer.

1 kHz penalty-force haptics over two deformation backends (surface
spring-damper with dual geometry, sphere-skeleton mass-spring network),
with pathology presets, diagnosis scoring, scene persistence and a
WebSocket session bridge.
"""

__version__ = "0.1.0"
