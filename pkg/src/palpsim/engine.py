"""Dual-rate simulation engine.

One stepping context owns the mutable world. It advances haptics at a
fixed 1 kHz and publishes immutable snapshots at the (20-60 Hz) graphics
cadence through a latest-wins slot that consumers poll; the haptic loop
never waits for anybody. Commands enter through a bounded queue and are
applied at tick boundaries only, which keeps ticks pure and replayable.

Modes: `realtime` paces against a monotonic clock (when the loop falls
behind by more than CATCHUP_CAP periods the schedule is rebased instead of
chasing it, trading punctuality for a bounded backlog; every tick still
executes, so trace length stays exact). `lockstep` ignores wall time
entirely: runs are bit-reproducible functions of (config, scene, device
script, command script) and may be driven tick by tick.
"""

from __future__ import annotations

import json
import math
import queue
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .deform import (
    GelSkeleton,
    SurfaceModel,
    build_skeleton,
    check_stability,
)
from .geometry import MeshAccel, TriMesh
from .haptics import (
    ForceSample,
    ForceTrace,
    ProbeState,
    VirtualDevice,
    WorldState,
    device_pose,
    haptic_tick,
)
from .pathology import LiverPreset, apply_edge_rounding, make_preset
from .scenegraph import Transform

CATCHUP_CAP = 5           # periods behind before the schedule is rebased
COMMAND_QUEUE_DEPTH = 1024
UNBOUNDED_TRACE_CAP = 120_000  # samples kept for duration-less (serve) runs


class EngineError(Exception):
    pass


class BackpressureError(EngineError):
    """Command queue full; the producer must slow down."""


@dataclass(frozen=True)
class SimConfig:
    haptic_rate: float = 1000.0
    graphics_rate: float = 30.0
    duration: float | None = 10.0    # seconds, None = run until stop()
    mode: str = "lockstep"           # "lockstep" | "realtime"
    seed: int = 0
    backend: str = "surface"         # "surface" | "skeleton"

    def __post_init__(self):
        if not (20.0 <= self.graphics_rate <= 60.0):
            raise EngineError("graphics_rate must be within 20..60 Hz")
        if self.mode not in ("lockstep", "realtime"):
            raise EngineError(f"unknown mode {self.mode!r}")
        if self.backend not in ("surface", "skeleton"):
            raise EngineError(f"unknown backend {self.backend!r}")
        if self.haptic_rate <= 0:
            raise EngineError("haptic_rate must be positive")


@dataclass(frozen=True)
class DeformParams:
    """Scene-tunable deformation constants (see the scene file schema)."""

    link_stiffness: float = 300.0
    link_damping: float = 2.0
    falloff_radius: float = 0.02
    max_indent: float = 0.03
    n_nodes: int = 128
    connectors: int = 3
    anchor_band: float = 0.1
    total_mass: float = 1.45
    contact_damping: float = 1.5
    force_cap: float = 7.0


@dataclass(frozen=True)
class WorldSpec:
    """Recipe to bake a WorldState: local mesh + placement + preset."""

    base_mesh: TriMesh
    preset: LiverPreset
    params: DeformParams = DeformParams()
    backend: str = "surface"
    liver_transform: Transform = Transform()
    object_id: str = "liver"


def build_world(spec: WorldSpec, seed: int, dt: float) -> WorldState:
    """Bake the world-frame haptic mesh and backend state from a spec."""
    mesh = spec.base_mesh
    if spec.preset.edge_rounding:
        mesh = apply_edge_rounding(mesh, spec.preset.edge_rounding)
    full = spec.liver_transform.compose(Transform(scale=spec.preset.scale))
    baked = mesh.with_vertices(
        np.array([full.apply(v) for v in mesh.vertices]), recompute_normals=True)
    accel = MeshAccel(baked)
    params = spec.params
    surface = None
    skeleton = None
    if spec.backend == "surface":
        surface = SurfaceModel.at_rest(
            baked, k_surface=spec.preset.k_base, b_surface=params.contact_damping,
            falloff_radius=params.falloff_radius, max_indent=params.max_indent)
    else:
        skeleton = build_skeleton(
            baked, params.n_nodes, connectors_per_node=params.connectors,
            seed=seed, link_stiffness=params.link_stiffness,
            link_damping=params.link_damping, total_mass=params.total_mass,
            anchor_band=params.anchor_band)
        check_stability(skeleton, dt)
    return WorldState(
        backend=spec.backend, mesh=baked, accel=accel, preset=spec.preset,
        world_to_local=full.inverse(), surface=surface, skeleton=skeleton,
        contact_damping=params.contact_damping, force_cap=params.force_cap,
        object_id=spec.object_id)


# ---------------------------------------------------------------------------
# commands


@dataclass(frozen=True)
class PoseCommand:
    position: tuple[float, float, float]


@dataclass(frozen=True)
class PresetCommand:
    condition: str
    seed: int = 0


@dataclass(frozen=True)
class BackendCommand:
    backend: str


@dataclass(frozen=True)
class ResetCommand:
    pass


Command = PoseCommand | PresetCommand | BackendCommand | ResetCommand


# ---------------------------------------------------------------------------
# snapshots and timing


@dataclass(frozen=True)
class SimSnapshot:
    seq: int
    tick: int
    t: float
    vertices: np.ndarray       # visual mesh vertices, world frame
    probe: ProbeState
    force: np.ndarray
    contacts: tuple
    events: tuple[str, ...]
    preset_id: str

    def __post_init__(self):
        self.vertices.setflags(write=False)


@dataclass
class TimingStats:
    p50: float
    p99: float
    max: float
    missed_deadlines: int
    achieved_haptic_rate: float
    achieved_snapshot_rate: float

    def to_json(self) -> str:
        return json.dumps({
            "p50": self.p50, "p99": self.p99, "max": self.max,
            "missed_deadlines": self.missed_deadlines,
            "achieved_haptic_rate": self.achieved_haptic_rate,
            "achieved_snapshot_rate": self.achieved_snapshot_rate,
        }, indent=2) + "\n"


# ---------------------------------------------------------------------------
# engine


class Engine:
    """Owns the world; steps it; publishes snapshots; applies commands."""

    def __init__(self, config: SimConfig, device: VirtualDevice, spec: WorldSpec):
        self.config = config
        self.device = device
        self.spec = replace(spec, backend=config.backend)
        self.dt = 1.0 / config.haptic_rate
        self.world = build_world(self.spec, config.seed, self.dt)
        self._commands: queue.Queue = queue.Queue(maxsize=COMMAND_QUEUE_DEPTH)
        self._command_tokens = 0
        self._snapshot: SimSnapshot | None = None
        self._seq = 0
        self._published = 0
        self._tick = 0
        self._stop = False
        self._durations: list[float] = []
        if config.duration is None:
            from collections import deque
            self.trace = ForceTrace(samples=deque(maxlen=UNBOUNDED_TRACE_CAP))
        else:
            self.trace = ForceTrace()

    # -- command side (any thread) ------------------------------------------

    def enqueue_command(self, cmd: Command) -> int:
        try:
            self._commands.put_nowait(cmd)
        except queue.Full:
            raise BackpressureError("command queue full (1024)") from None
        self._command_tokens += 1
        return self._command_tokens

    def latest_snapshot(self) -> SimSnapshot | None:
        return self._snapshot  # atomic reference read

    def stop(self) -> None:
        self._stop = True

    # -- stepping side (one context only) -------------------------------------

    def _apply_commands(self) -> None:
        pose: PoseCommand | None = None
        while True:
            try:
                cmd = self._commands.get_nowait()
            except queue.Empty:
                break
            if isinstance(cmd, PoseCommand):
                pose = cmd  # FIFO applied, last value effective this tick
            elif isinstance(cmd, PresetCommand):
                self.spec = replace(self.spec,
                                    preset=make_preset(cmd.condition, cmd.seed))
                self.world = build_world(self.spec, self.config.seed, self.dt)
            elif isinstance(cmd, BackendCommand):
                self.spec = replace(self.spec, backend=cmd.backend)
                self.world = build_world(self.spec, self.config.seed, self.dt)
            elif isinstance(cmd, ResetCommand):
                self._reset_world()
        if self.device.mode == "commanded":
            if pose is not None:
                self.device.command_pose(np.asarray(pose.position), self.dt)
            else:
                self.device.hold(self.dt)

    def _reset_world(self) -> None:
        w = self.world
        if w.backend == "surface":
            self.world = replace(w, surface=replace(w.surface, visual=w.surface.rest))
        else:
            self.world = replace(w, skeleton=w.skeleton.at_rest())

    def tick_once(self) -> ForceSample:
        """Advance exactly one haptic tick (lockstep driver entry point)."""
        self._apply_commands()
        t = self._tick * self.dt
        probe = device_pose(self.device, t)
        force, self.world, sample = haptic_tick(self.world, probe, t, self.dt)
        self.trace.append(sample)
        self._tick += 1
        due = math.floor(self._tick * self.config.graphics_rate / self.config.haptic_rate)
        if due > self._published:
            self._publish(sample)
            self._published = due
        return sample

    def _publish(self, sample: ForceSample) -> None:
        self._seq += 1
        contacts = (sample.contact,) if sample.contact is not None else ()
        self._snapshot = SimSnapshot(
            seq=self._seq, tick=self._tick - 1, t=sample.t,
            vertices=self.world.visual_mesh().vertices.copy(),
            probe=sample.probe, force=sample.force.copy(), contacts=contacts,
            events=sample.events,
            preset_id=f"{self.world.preset.condition}:{self.world.preset.nodularity.seed}")

    def run(self) -> tuple[ForceTrace, TimingStats]:
        """Execute floor(duration * haptic_rate) ticks (or until stop())."""
        cfg = self.config
        n_ticks = (None if cfg.duration is None
                   else math.floor(cfg.duration * cfg.haptic_rate))
        if cfg.mode == "lockstep":
            wall0 = time.perf_counter()
            while not self._stop and (n_ticks is None or self._tick < n_ticks):
                t0 = time.perf_counter()
                self.tick_once()
                self._durations.append(time.perf_counter() - t0)
            wall = time.perf_counter() - wall0
            return self.trace, self._stats(wall, realtime=False)
        return self._run_realtime(n_ticks)

    def _run_realtime(self, n_ticks: int | None) -> tuple[ForceTrace, TimingStats]:
        import gc

        period = self.dt
        gc_was_enabled = gc.isenabled()
        gc.disable()  # keep collector pauses out of the 1 ms budget
        try:
            start = time.perf_counter()
            deadline = start + period
            while not self._stop and (n_ticks is None or self._tick < n_ticks):
                t0 = time.perf_counter()
                self.tick_once()
                t1 = time.perf_counter()
                self._durations.append(t1 - t0)
                if t1 > deadline + CATCHUP_CAP * period:
                    # too far behind: rebase instead of chasing the backlog
                    deadline = t1
                    continue
                while True:
                    remaining = deadline - time.perf_counter()
                    if remaining <= 0:
                        break
                    if remaining > 3e-4:
                        time.sleep(remaining - 2e-4)
                deadline += period
            wall = time.perf_counter() - start
        finally:
            if gc_was_enabled:
                gc.enable()
        return self.trace, self._stats(wall, realtime=True)

    def _stats(self, wall: float, realtime: bool) -> TimingStats:
        d = np.asarray(self._durations)
        missed = int((d > self.dt).sum()) if realtime else 0
        if realtime and wall > 0:
            haptic = self._tick / wall
            snaps = self._seq / wall
        else:  # lockstep runs in virtual time
            haptic = self.config.haptic_rate
            snaps = (self._seq / (self._tick * self.dt)) if self._tick else 0.0
        return TimingStats(
            p50=float(np.percentile(d, 50)) if len(d) else 0.0,
            p99=float(np.percentile(d, 99)) if len(d) else 0.0,
            max=float(d.max()) if len(d) else 0.0,
            missed_deadlines=missed,
            achieved_haptic_rate=haptic,
            achieved_snapshot_rate=snaps,
        )
