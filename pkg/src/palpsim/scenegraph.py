"""Hierarchical scene: nodes carrying transforms plus visual/haptic
attributes, parent transforms propagating to descendants.

Scenes are immutable snapshots; mutating operations return a new Scene.
Transform composition within one node is fixed as scale, then rotate, then
translate. Rotations are unit quaternions in (w, x, y, z) order; scale is
uniform (scalar) to keep composition shear-free.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


class SceneError(Exception):
    pass


def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_multiply(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = q2
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    u = np.array([x, y, z])
    return v + 2.0 * np.cross(u, np.cross(u, v) + w * v)


@dataclass(frozen=True)
class Transform:
    """Rigid transform plus uniform scale: p -> translation + scale * R(p)."""

    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = field(default_factory=quat_identity)
    scale: float = 1.0

    def __post_init__(self):
        t = np.ascontiguousarray(self.translation, dtype=np.float64)
        q = np.ascontiguousarray(self.rotation, dtype=np.float64)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "rotation", q)
        if abs(np.dot(q, q) - 1.0) > 1e-9:
            raise SceneError("rotation quaternion must be unit length")
        if self.scale <= 0:
            raise SceneError("scale must be positive")

    def apply(self, p: np.ndarray) -> np.ndarray:
        return self.translation + self.scale * quat_rotate(self.rotation, p)

    def apply_direction(self, d: np.ndarray) -> np.ndarray:
        return quat_rotate(self.rotation, d)

    def compose(self, inner: "Transform") -> "Transform":
        """self applied after inner: (self ∘ inner)(p) = self(inner(p))."""
        return Transform(
            translation=self.apply(inner.translation),
            rotation=quat_multiply(self.rotation, inner.rotation),
            scale=self.scale * inner.scale,
        )

    def inverse(self) -> "Transform":
        inv_q = quat_conjugate(self.rotation)
        inv_s = 1.0 / self.scale
        return Transform(
            translation=-inv_s * quat_rotate(inv_q, self.translation),
            rotation=inv_q,
            scale=inv_s,
        )

    def is_identity(self, tol: float = 0.0) -> bool:
        return (np.allclose(self.translation, 0.0, atol=tol)
                and np.allclose(self.rotation, quat_identity(), atol=tol)
                and abs(self.scale - 1.0) <= tol)


IDENTITY = Transform()


@dataclass(frozen=True)
class MaterialRef:
    """Haptic surface material: contact stiffness and damping."""

    stiffness: float  # N/m
    damping: float    # N*s/m


@dataclass(frozen=True)
class SceneNode:
    id: str
    local: Transform = IDENTITY
    children: tuple[str, ...] = ()
    geometry: str | None = None          # mesh asset reference
    haptic_material: MaterialRef | None = None
    visual_material: str | None = None   # color/style tag


@dataclass(frozen=True)
class Scene:
    root: str
    nodes: dict[str, SceneNode]

    def __post_init__(self):
        if self.root not in self.nodes:
            raise SceneError(f"root node {self.root!r} missing")
        seen_child = set()
        for node in self.nodes.values():
            for c in node.children:
                if c not in self.nodes:
                    raise SceneError(f"node {node.id!r} references unknown child {c!r}")
                if c in seen_child:
                    raise SceneError(f"node {c!r} has more than one parent")
                seen_child.add(c)
        if self.root in seen_child:
            raise SceneError("root must not have a parent")
        # every non-root node must be reachable (tree, no cycles/orphans)
        order = [nid for nid, _ in traverse(self)]
        if len(order) != len(self.nodes):
            raise SceneError("scene graph is not a single tree")

    def node(self, node_id: str) -> SceneNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise SceneError(f"unknown node id {node_id!r}") from None


def world_transform(scene: Scene, node_id: str) -> Transform:
    """Composition of local transforms from the root down to node_id."""
    chain = _path_from_root(scene, node_id)
    world = IDENTITY
    for nid in chain:
        world = world.compose(scene.nodes[nid].local)
    return world


def _path_from_root(scene: Scene, node_id: str) -> list[str]:
    if node_id not in scene.nodes:
        raise SceneError(f"unknown node id {node_id!r}")
    parent = {}
    for node in scene.nodes.values():
        for c in node.children:
            parent[c] = node.id
    chain = [node_id]
    while chain[-1] != scene.root:
        nid = chain[-1]
        if nid not in parent:
            raise SceneError(f"node {node_id!r} is not reachable from the root")
        chain.append(parent[nid])
    return list(reversed(chain))


def apply_group(scene: Scene, node_id: str, delta: Transform) -> Scene:
    """Pre-compose delta onto node_id's local transform.

    Every descendant's world transform changes by exactly delta applied at
    that subtree root; nodes outside the subtree are untouched.
    """
    node = scene.node(node_id)
    new_node = replace(node, local=delta.compose(node.local))
    nodes = dict(scene.nodes)
    nodes[node_id] = new_node
    return Scene(root=scene.root, nodes=nodes)


def traverse(scene: Scene) -> list[tuple[str, Transform]]:
    """Depth-first pre-order walk yielding (id, world transform)."""
    out: list[tuple[str, Transform]] = []
    stack: list[tuple[str, Transform]] = [(scene.root, IDENTITY)]
    while stack:
        nid, parent_world = stack.pop()
        node = scene.nodes[nid]
        world = parent_world.compose(node.local)
        out.append((nid, world))
        for child in reversed(node.children):
            stack.append((child, world))
    return out
