"""Virtual haptic device, penalty force law, and the per-tick haptic
evaluation against either deformation backend.

The device is virtual (scripted waypoints or externally commanded poses);
physical drivers are out of scope. Forces are unilateral penalties: stiff
proportional response to penetration plus a damping term, clamped to
f_max, never pulling.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass, field, replace

import numpy as np

from .collision import Contact, probe_vs_mesh, sphere_sphere
from .deform import GelSkeleton, SurfaceModel, indent_surface, step_skeleton
from .geometry import MeshAccel, TriMesh
from .pathology import LiverPreset, stiffness_at, tenderness_check
from .scenegraph import Transform

DEFAULT_PROBE_RADIUS = 0.005   # m
DEFAULT_CONTACT_DAMPING = 1.5  # N*s/m
DEFAULT_FORCE_CAP = 7.0        # N, small impedance device class
VELOCITY_SMOOTHING = 0.2       # EMA factor for commanded-pose velocity


class DeviceError(Exception):
    pass


class SimulationFault(Exception):
    """Non-finite state encountered; the engine halts with this diagnostic."""


@dataclass(frozen=True)
class ProbeState:
    position: np.ndarray
    velocity: np.ndarray
    radius: float = DEFAULT_PROBE_RADIUS


@dataclass(frozen=True)
class ForceSample:
    t: float
    probe: ProbeState
    force: np.ndarray
    contact: Contact | None
    events: tuple[str, ...] = ()


@dataclass
class ForceTrace:
    samples: list[ForceSample] = field(default_factory=list)

    def append(self, sample: ForceSample) -> None:
        self.samples.append(sample)

    def __len__(self) -> int:
        return len(self.samples)

    def to_csv_text(self) -> str:
        lines = ["tick,t,px,py,pz,vx,vy,vz,fx,fy,fz,depth,contact,events"]
        for tick, s in enumerate(self.samples):
            p, v, f = s.probe.position, s.probe.velocity, s.force
            depth = s.contact.depth if s.contact is not None else 0.0
            row = [str(tick), repr(s.t),
                   repr(p[0]), repr(p[1]), repr(p[2]),
                   repr(v[0]), repr(v[1]), repr(v[2]),
                   repr(f[0]), repr(f[1]), repr(f[2]),
                   repr(depth), "1" if s.contact is not None else "0",
                   ";".join(s.events)]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"


def parse_trace_csv(text: str) -> list[dict]:
    lines = text.strip().splitlines()
    header = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        parts = line.split(",")
        row = dict(zip(header, parts))
        for key in ("t", "px", "py", "pz", "vx", "vy", "vz", "fx", "fy", "fz", "depth"):
            row[key] = float(row[key])
        row["tick"] = int(row["tick"])
        row["contact"] = row["contact"] == "1"
        row["events"] = tuple(e for e in row["events"].split(";") if e)
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# virtual device


@dataclass
class VirtualDevice:
    """Scripted (waypoint) or commanded (externally set pose) probe source."""

    mode: str = "commanded"                        # "scripted" | "commanded"
    waypoints: list[tuple[float, np.ndarray]] = field(default_factory=list)
    radius: float = DEFAULT_PROBE_RADIUS
    _position: np.ndarray | None = None
    _velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def scripted(cls, waypoints, radius: float = DEFAULT_PROBE_RADIUS) -> "VirtualDevice":
        pts = [(float(t), np.asarray(p, dtype=float)) for t, p in waypoints]
        for (t0, _), (t1, _) in zip(pts, pts[1:]):
            if t1 <= t0:
                raise DeviceError("waypoint timestamps must be strictly increasing")
        if not pts:
            raise DeviceError("trajectory needs at least one waypoint")
        return cls(mode="scripted", waypoints=pts, radius=radius)

    def command_pose(self, position, dt: float) -> None:
        """Commanded mode: set the pose for the next tick; velocity is a
        backward difference smoothed with an exponential moving average."""
        position = np.asarray(position, dtype=float)
        if self._position is None:
            self._velocity = np.zeros(3)
        else:
            raw = (position - self._position) / dt
            self._velocity = (VELOCITY_SMOOTHING * raw
                              + (1.0 - VELOCITY_SMOOTHING) * self._velocity)
        self._position = position

    def hold(self, dt: float) -> None:
        """Commanded mode, no new pose this tick: velocity decays."""
        if self._position is not None:
            self._velocity = (1.0 - VELOCITY_SMOOTHING) * self._velocity


def device_pose(dev: VirtualDevice, t: float) -> ProbeState:
    if dev.mode == "scripted":
        wp = dev.waypoints
        if t < wp[0][0] - 1e-12 or t > wp[-1][0] + 1e-12:
            raise DeviceError(f"t={t} outside trajectory span "
                              f"[{wp[0][0]}, {wp[-1][0]}]")
        if len(wp) == 1:
            return ProbeState(position=wp[0][1].copy(), velocity=np.zeros(3),
                              radius=dev.radius)
        times = [w[0] for w in wp]
        i = bisect_right(times, t)
        if i >= len(wp):
            i = len(wp) - 1
        if i == 0:
            i = 1
        (t0, p0), (t1, p1) = wp[i - 1], wp[i]
        slope = (p1 - p0) / (t1 - t0)
        alpha = min(max((t - t0) / (t1 - t0), 0.0), 1.0)
        return ProbeState(position=p0 + alpha * (p1 - p0), velocity=slope,
                          radius=dev.radius)
    if dev._position is None:
        raise DeviceError("no pose commanded yet")
    return ProbeState(position=dev._position.copy(),
                      velocity=dev._velocity.copy(), radius=dev.radius)


def load_trajectory(text: str, radius: float = DEFAULT_PROBE_RADIUS) -> VirtualDevice:
    """Parse `t x y z` waypoint lines (seconds, meters)."""
    waypoints = []
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise DeviceError(f"line {ln}: expected `t x y z`")
        try:
            t, x, y, z = (float(v) for v in parts)
        except ValueError as exc:
            raise DeviceError(f"line {ln}: {exc}") from exc
        waypoints.append((t, np.array([x, y, z])))
    return VirtualDevice.scripted(waypoints, radius=radius)


# ---------------------------------------------------------------------------
# penalty force


def penalty_force(contact: Contact, probe_vel, k: float, b: float,
                  f_max: float = DEFAULT_FORCE_CAP) -> np.ndarray:
    """f = max(0, k depth - b (v . n)) n, clamped to |f| <= f_max.

    Unilateral: retracting fast enough yields exactly zero (no sticking);
    the force never points into the surface.
    """
    mag = k * contact.depth - b * float(np.dot(probe_vel, contact.normal))
    mag = min(max(mag, 0.0), f_max)
    return mag * contact.normal


# ---------------------------------------------------------------------------
# world state and per-tick evaluation


@dataclass(frozen=True)
class WorldState:
    """Everything the haptic loop owns: the baked (world frame) haptic
    mesh, the active backend state and the pathology field."""

    backend: str                       # "surface" | "skeleton"
    mesh: TriMesh                      # haptic geometry, world frame
    accel: MeshAccel
    preset: LiverPreset
    world_to_local: Transform          # into the preset's stiffness frame
    surface: SurfaceModel | None = None
    skeleton: GelSkeleton | None = None
    contact_damping: float = DEFAULT_CONTACT_DAMPING
    force_cap: float = DEFAULT_FORCE_CAP
    gravity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    object_id: str = "liver"

    def visual_mesh(self) -> TriMesh:
        if self.backend == "surface":
            return self.surface.visual
        from .deform import skin_mesh
        return skin_mesh(self.skeleton, self.mesh)


def haptic_tick(world: WorldState, probe: ProbeState, t: float,
                dt: float) -> tuple[np.ndarray, WorldState, ForceSample]:
    """One haptic evaluation: collide, compute the penalty force, advance
    the deformable state, record a ForceSample."""
    if not np.isfinite(probe.position).all() or not np.isfinite(probe.velocity).all():
        raise SimulationFault("non-finite probe state")
    if world.backend == "surface":
        force, new_world, contact = _tick_surface(world, probe)
    else:
        force, new_world, contact = _tick_skeleton(world, probe, dt)
    if not np.isfinite(force).all():
        raise SimulationFault("non-finite contact force")
    events = []
    ev = tenderness_check(world.preset, force)
    if ev is not None:
        events.append("tenderness")
    sample = ForceSample(t=t, probe=probe, force=force, contact=contact,
                         events=tuple(events))
    return force, new_world, sample


def _tick_surface(world: WorldState, probe: ProbeState):
    contact = probe_vs_mesh(probe.position, probe.radius, world.mesh,
                            world.accel, object_id=world.object_id)
    if contact is None:
        if world.surface.visual is not world.surface.rest:
            world = replace(world, surface=replace(world.surface,
                                                   visual=world.surface.rest))
        return np.zeros(3), world, None
    k = stiffness_at(world.preset, world.world_to_local.apply(contact.point))
    force = penalty_force(contact, probe.velocity, k,
                          world.contact_damping, world.force_cap)
    surface = indent_surface(world.surface, contact.point, contact.normal,
                             contact.depth)
    return force, replace(world, surface=surface), contact


def _tick_skeleton(world: WorldState, probe: ProbeState, dt: float):
    skel = world.skeleton
    diff = probe.position - skel.positions
    dist2 = np.einsum("ij,ij->i", diff, diff)
    reach = probe.radius + skel.radii
    touching = np.nonzero(dist2 < reach * reach)[0]
    total = np.zeros(3)
    external = np.zeros_like(skel.positions)
    deepest: Contact | None = None
    for j in touching:
        contact = sphere_sphere(probe.position, probe.radius,
                                skel.positions[j], float(skel.radii[j]),
                                feature=(world.object_id, int(j)))
        if contact is None:
            continue
        k = stiffness_at(world.preset, world.world_to_local.apply(contact.point))
        # the damped term uses the surface-relative velocity: against moving
        # nodes a static probe must still dissipate the contact bounce
        rel_vel = probe.velocity - skel.velocities[j]
        f = penalty_force(contact, rel_vel, k,
                          world.contact_damping, world.force_cap)
        total += f
        external[j] -= f
        if deepest is None or contact.depth > deepest.depth:
            deepest = contact
    # cap the reported probe force after summing node contributions
    mag = float(np.linalg.norm(total))
    if mag > world.force_cap:
        scale = world.force_cap / mag
        total *= scale
        external *= scale
    skel = step_skeleton(skel, dt, external=external, gravity=world.gravity)
    return total, replace(world, skeleton=skel), deepest
