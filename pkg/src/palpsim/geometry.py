"""Triangle-mesh substrate: loading, decimation, normals, closest-point
queries and uniform surface sampling.

All coordinates are meters, float64. Meshes are treated as immutable values:
operations return new TriMesh instances and never mutate their inputs.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-12  # m^2, triangles at or below this are slivers


class MeshError(Exception):
    """Invalid mesh topology or geometry."""


class MeshParseError(MeshError):
    """Mesh file could not be parsed; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


def vec3(x: float, y: float, z: float) -> np.ndarray:
    return np.array([x, y, z], dtype=np.float64)


def norm(v: np.ndarray) -> float:
    return float(np.sqrt(np.dot(v, v)))


def normalized(v: np.ndarray) -> np.ndarray:
    n = norm(v)
    if n < 1e-12:
        raise ValueError("cannot normalize near-zero vector")
    return v / n


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned bounding box, min <= max componentwise."""

    min: np.ndarray
    max: np.ndarray

    def inflated(self, margin: float) -> "Aabb":
        return Aabb(self.min - margin, self.max + margin)

    def overlaps(self, other: "Aabb") -> bool:
        return bool(np.all(self.min <= other.max) and np.all(other.min <= self.max))

    def contains(self, p: np.ndarray) -> bool:
        return bool(np.all(p >= self.min) and np.all(p <= self.max))

    @property
    def diagonal(self) -> float:
        return norm(self.max - self.min)


@dataclass(frozen=True)
class TriMesh:
    """Indexed triangle surface.

    vertices: (N, 3) float64, triangles: (M, 3) int64 indices into vertices,
    vertex_normals: (N, 3) unit vectors (area-weighted average of incident
    face normals).
    """

    vertices: np.ndarray
    triangles: np.ndarray
    vertex_normals: np.ndarray = field(repr=False)

    def __post_init__(self):
        for arr in (self.vertices, self.triangles, self.vertex_normals):
            arr.setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def aabb(self) -> Aabb:
        return Aabb(self.vertices.min(axis=0), self.vertices.max(axis=0))

    def face_normals(self) -> np.ndarray:
        return _face_normals(self.vertices, self.triangles)[0]

    def face_centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    def with_vertices(self, vertices: np.ndarray, recompute_normals: bool = False) -> "TriMesh":
        """New mesh with the same topology and replaced vertex positions.

        Normals are carried over unchanged unless recompute_normals is set;
        per-tick deformation keeps rest normals, rendering paths recompute.
        """
        vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        if vertices.shape != self.vertices.shape:
            raise MeshError("vertex array shape mismatch")
        if recompute_normals:
            normals = compute_vertex_normals_raw(vertices, self.triangles)
        else:
            normals = self.vertex_normals
        return TriMesh(vertices, self.triangles, normals)

    def validate(self) -> None:
        """Raise MeshError on any violated TriMesh invariant."""
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise MeshError("vertices must be (N, 3)")
        if not np.all(np.isfinite(self.vertices)):
            raise MeshError("non-finite vertex coordinates")
        if self.n_triangles:
            if self.triangles.min() < 0 or self.triangles.max() >= self.n_vertices:
                raise MeshError("triangle index out of range")
            areas = _face_normals(self.vertices, self.triangles)[1]
            if areas.size and areas.min() <= DEGENERATE_AREA:
                raise MeshError("degenerate triangle present")
        norms = np.linalg.norm(self.vertex_normals, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise MeshError("vertex normals not unit length")


def make_mesh(vertices, triangles) -> TriMesh:
    """Build a TriMesh from raw arrays, dropping degenerate triangles.

    Slivers (area <= 1e-12 m^2) are common in scanned anatomy; they are
    dropped with a logged count rather than rejected.
    """
    vertices = np.ascontiguousarray(vertices, dtype=np.float64)
    triangles = np.ascontiguousarray(triangles, dtype=np.int64)
    if triangles.size:
        if triangles.min() < 0 or triangles.max() >= len(vertices):
            raise MeshError("triangle index out of range")
        areas = _face_normals(vertices, triangles)[1]
        bad = areas <= DEGENERATE_AREA
        if bad.any():
            logger.warning("dropped %d degenerate triangle(s)", int(bad.sum()))
            triangles = triangles[~bad]
    normals = compute_vertex_normals_raw(vertices, triangles)
    return TriMesh(vertices, triangles, normals)


# ---------------------------------------------------------------------------
# loading / saving


def load_mesh(text: str) -> TriMesh:
    """Parse an OBJ-subset (v/f records, triangulated) or OFF document.

    Vertex order is preserved from the file. Degenerate faces are dropped
    with a warning; structural problems raise MeshParseError with the
    offending line number.
    """
    stripped = text.lstrip()
    if stripped[:3].upper() == "OFF":
        return _load_off(text)
    return _load_obj(text)


def _load_obj(text: str) -> TriMesh:
    verts: list[tuple[float, float, float]] = []
    faces: list[tuple[int, int, int]] = []
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        tag = parts[0]
        if tag == "v":
            if len(parts) < 4:
                raise MeshParseError("vertex record needs 3 coordinates", ln)
            try:
                verts.append((float(parts[1]), float(parts[2]), float(parts[3])))
            except ValueError as exc:
                raise MeshParseError(f"bad vertex coordinate: {exc}", ln) from exc
        elif tag == "f":
            idx = parts[1:]
            if len(idx) != 3:
                raise MeshParseError(f"non-triangular face with {len(idx)} vertices", ln)
            tri = []
            for tok in idx:
                head = tok.split("/", 1)[0]
                try:
                    i = int(head)
                except ValueError as exc:
                    raise MeshParseError(f"bad face index {tok!r}", ln) from exc
                if i < 0:
                    i = len(verts) + 1 + i  # OBJ negative indices count from the end
                if not (1 <= i <= len(verts)):
                    raise MeshParseError(f"face index {i} out of range (have {len(verts)} vertices)", ln)
                tri.append(i - 1)
            faces.append(tuple(tri))
        # other record types (vn, vt, o, g, s, usemtl, ...) are ignored
    if not verts:
        raise MeshParseError("no vertices found")
    return make_mesh(np.array(verts), np.array(faces, dtype=np.int64).reshape(-1, 3))


def _load_off(text: str) -> TriMesh:
    lines = text.splitlines()
    # significant lines with their original numbers, comments stripped
    body = [(ln, s) for ln, raw in enumerate(lines, start=1)
            if (s := raw.split("#", 1)[0].strip())]
    if not body or body[0][1].upper() != "OFF":
        raise MeshParseError("missing OFF header", body[0][0] if body else 1)
    if len(body) < 2:
        raise MeshParseError("missing OFF counts line")
    ln, counts = body[1]
    parts = counts.split()
    if len(parts) < 2:
        raise MeshParseError("OFF counts line needs vertex and face counts", ln)
    try:
        nv, nf = int(parts[0]), int(parts[1])
    except ValueError as exc:
        raise MeshParseError(f"bad OFF counts: {exc}", ln) from exc
    if len(body) < 2 + nv + nf:
        raise MeshParseError(f"OFF document truncated: expected {nv} vertices and {nf} faces")
    verts = []
    for ln, line in body[2:2 + nv]:
        p = line.split()
        if len(p) < 3:
            raise MeshParseError("vertex line needs 3 coordinates", ln)
        try:
            verts.append((float(p[0]), float(p[1]), float(p[2])))
        except ValueError as exc:
            raise MeshParseError(f"bad vertex coordinate: {exc}", ln) from exc
    faces = []
    for ln, line in body[2 + nv:2 + nv + nf]:
        p = line.split()
        try:
            arity = int(p[0])
        except (IndexError, ValueError) as exc:
            raise MeshParseError("bad face line", ln) from exc
        if arity != 3 or len(p) < 4:
            raise MeshParseError(f"non-triangular face (arity {arity})", ln)
        try:
            tri = (int(p[1]), int(p[2]), int(p[3]))
        except ValueError as exc:
            raise MeshParseError(f"bad face index: {exc}", ln) from exc
        for i in tri:
            if not (0 <= i < nv):
                raise MeshParseError(f"face index {i} out of range (have {nv} vertices)", ln)
        faces.append(tri)
    return make_mesh(np.array(verts), np.array(faces, dtype=np.int64).reshape(-1, 3))


def save_obj(mesh: TriMesh) -> str:
    out = []
    for v in mesh.vertices:
        out.append(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
    for t in mesh.triangles:
        out.append(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# normals


def _face_normals(vertices: np.ndarray, triangles: np.ndarray):
    """Unit face normals and triangle areas. Zero-area faces get a zero normal."""
    a = vertices[triangles[:, 0]]
    b = vertices[triangles[:, 1]]
    c = vertices[triangles[:, 2]]
    cross = np.cross(b - a, c - a)
    twice_area = np.linalg.norm(cross, axis=1)
    areas = 0.5 * twice_area
    with np.errstate(invalid="ignore", divide="ignore"):
        normals = np.where(twice_area[:, None] > 0, cross / twice_area[:, None], 0.0)
    return normals, areas


def compute_vertex_normals_raw(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Area-weighted average of incident face normals, normalized.

    Isolated vertices get +z by convention (flagged with a warning).
    """
    acc = np.zeros_like(vertices, dtype=np.float64)
    if len(triangles):
        normals, areas = _face_normals(vertices, triangles)
        weighted = normals * areas[:, None]
        for k in range(3):
            col = triangles[:, k]
            for c in range(3):
                acc[:, c] += np.bincount(col, weights=weighted[:, c], minlength=len(vertices))
    lens = np.linalg.norm(acc, axis=1)
    isolated = lens < 1e-20
    if isolated.any():
        logger.warning("%d isolated vertex/vertices assigned +z normal", int(isolated.sum()))
        acc[isolated] = (0.0, 0.0, 1.0)
        lens[isolated] = 1.0
    return acc / lens[:, None]


def compute_vertex_normals(mesh: TriMesh) -> np.ndarray:
    return compute_vertex_normals_raw(mesh.vertices, mesh.triangles)


# ---------------------------------------------------------------------------
# decimation


class DecimationError(MeshError):
    pass


def decimate(mesh: TriMesh, target_tris: int) -> TriMesh:
    """Reduce triangle count to at most target_tris by iterative
    shortest-edge collapse with midpoint placement.

    Collapses that would flip a surviving face normal, create a sliver, or
    duplicate a triangle are rejected. Returns the input mesh unchanged when
    it is already within budget. Deterministic.
    """
    if target_tris < 4:
        raise DecimationError("target below minimum closed-surface size (4 triangles)")
    if mesh.n_triangles <= target_tris:
        return mesh

    verts = [tuple(map(float, v)) for v in mesh.vertices]
    alive_v = [True] * len(verts)
    gen = [0] * len(verts)  # bumped whenever a vertex moves or dies
    tris: list[list[int] | None] = [list(map(int, t)) for t in mesh.triangles]
    incident: list[set[int]] = [set() for _ in verts]
    tri_keys: set[tuple[int, int, int]] = set()
    for ti, t in enumerate(tris):
        for vi in t:
            incident[vi].add(ti)
        tri_keys.add(tuple(sorted(t)))
    n_tris = len(tris)

    def edge_len2(u, v):
        a, b = verts[u], verts[v]
        dx, dy, dz = a[0] - b[0], a[1] - b[1], a[2] - b[2]
        return dx * dx + dy * dy + dz * dz

    def tri_geometry(p0, p1, p2):
        ux, uy, uz = p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2]
        vx, vy, vz = p2[0] - p0[0], p2[1] - p0[1], p2[2] - p0[2]
        nx = uy * vz - uz * vy
        ny = uz * vx - ux * vz
        nz = ux * vy - uy * vx
        return nx, ny, nz  # twice-area-weighted normal

    heap: list[tuple[float, int, int, int, int]] = []

    def push_edges_of(u):
        seen = set()
        for ti in incident[u]:
            for v in tris[ti]:
                if v != u and v not in seen:
                    seen.add(v)
                    a, b = (u, v) if u < v else (v, u)
                    heapq.heappush(heap, (edge_len2(a, b), a, b, gen[a], gen[b]))

    pushed = set()
    for t in tris:
        for e in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
            a, b = (e[0], e[1]) if e[0] < e[1] else (e[1], e[0])
            if (a, b) not in pushed:
                pushed.add((a, b))
                heapq.heappush(heap, (edge_len2(a, b), a, b, 0, 0))
    del pushed

    while n_tris > target_tris and heap:
        _, u, v, gu, gv = heapq.heappop(heap)
        if not (alive_v[u] and alive_v[v]) or gen[u] != gu or gen[v] != gv:
            continue
        shared = incident[u] & incident[v]
        if not shared:
            continue
        # would removing the shared faces still hit the budget without overshooting?
        mid = tuple((verts[u][k] + verts[v][k]) * 0.5 for k in range(3))

        # validate every surviving face touching u or v at the midpoint
        ok = True
        new_keys = []
        for ti in (incident[u] | incident[v]) - shared:
            t = tris[ti]
            old_pts = [verts[w] for w in t]
            new_pts = [mid if w in (u, v) else verts[w] for w in t]
            onx, ony, onz = tri_geometry(*old_pts)
            nnx, nny, nnz = tri_geometry(*new_pts)
            new_area2 = nnx * nnx + nny * nny + nnz * nnz
            if new_area2 <= (2.0 * DEGENERATE_AREA) ** 2:
                ok = False
                break
            if onx * nnx + ony * nny + onz * nnz <= 0.0:
                ok = False  # normal flip
                break
            key = tuple(sorted(u if w == v else w for w in t))
            new_keys.append((ti, key))
        if ok:
            # fin check: collapse must not create a duplicate triangle
            seen_keys = set()
            for ti, key in new_keys:
                old_key = tuple(sorted(tris[ti]))
                if (key in tri_keys and key != old_key) or key in seen_keys:
                    ok = False
                    break
                seen_keys.add(key)
        if not ok:
            continue

        # perform the collapse: u absorbs v at the midpoint
        for ti in shared:
            for w in tris[ti]:
                incident[w].discard(ti)
            tri_keys.discard(tuple(sorted(tris[ti])))
            tris[ti] = None
            n_tris -= 1
        for ti, key in new_keys:
            tri_keys.discard(tuple(sorted(tris[ti])))
            tris[ti] = [u if w == v else w for w in tris[ti]]
            tri_keys.add(key)
            incident[u].add(ti)
        verts[u] = mid
        alive_v[v] = False
        incident[v].clear()
        gen[u] += 1
        gen[v] += 1
        push_edges_of(u)

    if n_tris > target_tris:
        raise DecimationError(
            f"could not reach target {target_tris}: stuck at {n_tris} triangles")

    remap = {}
    new_verts = []
    for vi, ok in enumerate(alive_v):
        if ok and incident[vi]:
            remap[vi] = len(new_verts)
            new_verts.append(verts[vi])
    new_tris = [[remap[w] for w in t] for t in tris if t is not None]
    return make_mesh(np.array(new_verts), np.array(new_tris, dtype=np.int64))


# ---------------------------------------------------------------------------
# closest point


def closest_point_on_triangles(p: np.ndarray, vertices: np.ndarray,
                               triangles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closest point to p on each listed triangle (vectorized).

    Returns (points (K,3), squared distances (K,)). Region classification
    follows the standard barycentric clamp.
    """
    a = vertices[triangles[:, 0]]
    b = vertices[triangles[:, 1]]
    c = vertices[triangles[:, 2]]
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    out = np.empty_like(a)
    done = np.zeros(len(a), dtype=bool)

    def settle(mask, pts):
        fresh = mask & ~done
        if fresh.any():
            out[fresh] = pts[fresh]
            done[fresh] = True

    settle((d1 <= 0) & (d2 <= 0), a)                       # vertex a
    settle((d3 >= 0) & (d4 <= d3), b)                      # vertex b
    settle((d6 >= 0) & (d5 <= d6), c)                      # vertex c

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        settle((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + np.nan_to_num(t_ab)[:, None] * ab)
        t_ac = d2 / (d2 - d6)
        settle((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + np.nan_to_num(t_ac)[:, None] * ac)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        settle((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0),
               b + np.nan_to_num(t_bc)[:, None] * (c - b))
        denom = va + vb + vc
        v = np.where(denom != 0, vb / denom, 0.0)
        w = np.where(denom != 0, vc / denom, 0.0)
    settle(np.ones(len(a), dtype=bool), a + v[:, None] * ab + w[:, None] * ac)

    diff = out - p
    return out, np.einsum("ij,ij->i", diff, diff)


def closest_point_on_mesh(p: np.ndarray, mesh: TriMesh,
                          candidate_tris: np.ndarray | None = None
                          ) -> tuple[np.ndarray, int, float]:
    """Closest surface point to p.

    Returns (point, triangle index, distance). Ties break to the lowest
    triangle index. candidate_tris restricts the search to a subset of
    sorted triangle indices (used by MeshAccel, which guarantees the subset
    contains the global minimizer).
    """
    if mesh.n_triangles == 0:
        raise MeshError("empty mesh")
    if candidate_tris is None:
        pts, d2 = closest_point_on_triangles(p, mesh.vertices, mesh.triangles)
        best = int(np.argmin(d2))
        return pts[best].copy(), best, float(np.sqrt(d2[best]))
    pts, d2 = closest_point_on_triangles(p, mesh.vertices, mesh.triangles[candidate_tris])
    k = int(np.argmin(d2))
    return pts[k].copy(), int(candidate_tris[k]), float(np.sqrt(d2[k]))


class MeshAccel:
    """Exact closest-point accelerator: kd-tree over triangle centroids.

    The candidate ball radius (upper bound + max circumradius) guarantees
    every triangle that could attain the minimum distance is examined, so
    results are identical to the brute-force query, tie-breaks included.
    """

    def __init__(self, mesh: TriMesh):
        self.mesh = mesh
        if mesh.n_triangles == 0:
            raise MeshError("empty mesh")
        self.centroids = mesh.face_centroids()
        corners = mesh.vertices[mesh.triangles]
        self.circumradius = np.linalg.norm(
            corners - self.centroids[:, None, :], axis=2).max(axis=1)
        self.max_circumradius = float(self.circumradius.max())
        self.tree = cKDTree(self.centroids)
        # any interior point of a closed surface is within half the smallest
        # box extent of the surface; used by the conservative far reject
        box = mesh.aabb()
        self.interior_bound = float((box.max - box.min).min()) * 0.5

    def certainly_farther_than(self, p: np.ndarray, radius: float) -> bool:
        """Conservative reject: True only if p is provably outside the
        surface with clearance > radius. Never rejects a real contact."""
        d_c, _ = self.tree.query(p)
        return bool(d_c - self.max_circumradius > max(radius, self.interior_bound))

    def closest_point(self, p: np.ndarray) -> tuple[np.ndarray, int, float]:
        _, nearest = self.tree.query(p)
        _, d2 = closest_point_on_triangles(
            p, self.mesh.vertices, self.mesh.triangles[nearest:nearest + 1])
        upper = float(np.sqrt(d2[0]))
        idx = self.tree.query_ball_point(p, upper + self.max_circumradius + 1e-12)
        candidates = np.sort(np.asarray(idx, dtype=np.int64))
        return closest_point_on_mesh(p, self.mesh, candidates)


# ---------------------------------------------------------------------------
# farthest point sampling


def surface_candidates(mesh: TriMesh) -> np.ndarray:
    """Dense candidate set for sampling: all vertices then all centroids."""
    return np.vstack([mesh.vertices, mesh.face_centroids()])


def farthest_point_sample(mesh: TriMesh, n: int, seed: int = 0) -> np.ndarray:
    """Greedy farthest-point sampling over vertices + triangle centroids.

    The seed picks the first point (index seed mod candidate count); every
    subsequent point maximizes the minimum Euclidean distance to the points
    chosen so far. Ties break to the lowest candidate index, so the result
    is fully deterministic.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    cands = surface_candidates(mesh)
    if n > len(cands):
        raise MeshError(f"requested {n} samples but only {len(cands)} candidates")
    first = int(seed) % len(cands)
    chosen = [first]
    diff = cands - cands[first]
    min_d2 = np.einsum("ij,ij->i", diff, diff)
    for _ in range(n - 1):
        nxt = int(np.argmax(min_d2))
        chosen.append(nxt)
        diff = cands - cands[nxt]
        np.minimum(min_d2, np.einsum("ij,ij->i", diff, diff), out=min_d2)
    return cands[chosen].copy()
