"""Contact queries: probe sphere vs haptic mesh, sphere-sphere, and
skeleton-skeleton tests with an AABB broad phase.

Conventions: contact normals point out of the touched object toward the
toucher; depth >= 0; strict inequality at the touching boundary (grazing
spheres report no contact). Deep pierce beyond the far side of a thin wall
is reported via the signed-side test only; thickness is not computed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .deform import GelSkeleton
from .geometry import Aabb, MeshAccel, TriMesh, closest_point_on_mesh

CONCENTRIC_NORMAL = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class Contact:
    point: np.ndarray
    normal: np.ndarray        # unit, out of the touched object
    depth: float              # m, >= 0
    feature: tuple[str, int]  # (object id, triangle or node index)


def sphere_sphere(c1: np.ndarray, r1: float, c2: np.ndarray, r2: float,
                  feature: tuple[str, int] = ("sphere", 0)) -> Contact | None:
    """Overlap test: contact iff |c1-c2| < r1+r2 (strict).

    The normal points from c2 toward c1; the point sits midway along the
    overlap segment. Concentric centers fall back to the +z normal.
    """
    d = np.asarray(c1, dtype=float) - c2
    dist = float(np.sqrt(np.dot(d, d)))
    if dist >= r1 + r2:
        return None
    if dist < 1e-12:
        normal = CONCENTRIC_NORMAL.copy()
        depth = r1 + r2
    else:
        normal = d / dist
        depth = r1 + r2 - dist
    # midpoint of [surface of 2 toward 1, surface of 1 toward 2]
    point = np.asarray(c2, dtype=float) + normal * (r2 - 0.5 * depth)
    return Contact(point=point, normal=normal, depth=depth, feature=feature)


def skeleton_aabb(skel: GelSkeleton) -> Aabb:
    r = skel.radii[:, None]
    return Aabb((skel.positions - r).min(axis=0), (skel.positions + r).max(axis=0))


def skeleton_skeleton(a: GelSkeleton, b: GelSkeleton,
                      ids: tuple[str, str] = ("a", "b")) -> list[Contact]:
    """All node-pair contacts between two skeletons, sorted by (a idx, b idx).

    Broad phase: skeleton AABBs inflated by the other side's largest node
    radius, then per-a-node AABB pruning. The broad phase only ever discards
    pairs the exact test would reject.
    """
    box_a = skeleton_aabb(a)
    box_b = skeleton_aabb(b)
    if not box_a.overlaps(box_b):
        return []
    contacts: list[Contact] = []
    max_rb = float(b.radii.max())
    lo = box_b.min - max_rb
    hi = box_b.max + max_rb
    for i in range(a.n_nodes):
        ca, ra = a.positions[i], float(a.radii[i])
        if np.any(ca + ra < lo) or np.any(ca - ra > hi):
            continue
        d = b.positions - ca
        dist2 = np.einsum("ij,ij->i", d, d)
        reach = ra + b.radii
        for j in np.nonzero(dist2 < reach * reach)[0]:
            c = sphere_sphere(ca, ra, b.positions[j], float(b.radii[j]),
                              feature=(f"{ids[0]}:{i}", int(j)))
            if c is not None:
                contacts.append(c)
    return contacts


def probe_vs_mesh(center: np.ndarray, radius: float, mesh: TriMesh,
                  accel: MeshAccel | None = None,
                  object_id: str = "mesh") -> Contact | None:
    """Probe sphere against the haptic (rest) geometry.

    Outside the surface: contact iff closest distance < radius, with
    depth = radius - distance. Inside (signed test against the closest
    triangle's outward normal): depth = radius + distance. The normal is
    the closest triangle's geometric normal, oriented outward; the point is
    the closest surface point.
    """
    if radius <= 0:
        raise ValueError("probe radius must be positive")
    center = np.asarray(center, dtype=float)
    if accel is not None:
        if accel.certainly_farther_than(center, radius):
            return None
        q, tri, dist = accel.closest_point(center)
    else:
        q, tri, dist = closest_point_on_mesh(center, mesh)
    a, b, c = mesh.vertices[mesh.triangles[tri]]
    n = np.cross(b - a, c - a)
    n /= np.linalg.norm(n)
    inside = float(np.dot(center - q, n)) < 0.0
    if inside:
        return Contact(point=q, normal=n, depth=radius + dist,
                       feature=(object_id, int(tri)))
    if dist >= radius:
        return None
    return Contact(point=q, normal=n, depth=radius - dist,
                   feature=(object_id, int(tri)))
