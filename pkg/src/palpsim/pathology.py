"""Liver anatomy defaults, disease presets as stiffness/size/tenderness
parameter fields, stiffness estimation from palpation traces, and the
reference diagnosis classifier.

Anatomy defaults follow the clinical means (10 cm span and 1.4-1.5 kg for
the adult male, 7 cm and 1.2-1.4 kg for the adult female); a span deviating
2 cm or more from the mean counts as abnormal, so every abnormal preset
scales to at least +2 cm. Numeric stiffness values are calibration
constants, not measurements; only their ordering is meaningful:

    neoplasm max >> cirrhosis max > fatty >= normal ~= hepatitis,

with hepatitis distinguished by tenderness events rather than hardness.
All fields and the noise lattice live in the liver's local (unscaled)
frame; the enlargement factor is applied by the scene transform.
"""

from __future__ import annotations

import importlib.resources
import math
from dataclasses import dataclass

import numpy as np

CONDITIONS = ("cirrhosis", "fatty", "hepatitis", "neoplasm", "normal")

QUASI_STATIC_SPEED = 0.005   # m/s, velocity bound for stiffness regression
MIN_FIT_SAMPLES = 10

# canonical local-frame liver semi-extents (matches the bundled asset)
_LIVER_SEMI = (0.072, 0.050, 0.032)

# 3x3 anterior palpation grid in the local frame (x, y); the protocol and
# the lesion placement share these canonical sites
ANTERIOR_SITES = tuple(
    (sx * 0.4 * _LIVER_SEMI[0], sy * 0.4 * _LIVER_SEMI[1])
    for sy in (-1, 0, 1) for sx in (-1, 0, 1)
)


class PathologyError(Exception):
    pass


class InsufficientSamplesError(PathologyError):
    pass


class ProtocolError(PathologyError):
    pass


@dataclass(frozen=True)
class AnatomyParams:
    span: float   # m, percussion span
    mass: float   # kg
    sex: str


ANATOMY = {
    "male": AnatomyParams(span=0.10, mass=1.45, sex="male"),
    "female": AnatomyParams(span=0.07, mass=1.30, sex="female"),
}

ABNORMAL_SPAN_DEVIATION = 0.02  # m


@dataclass(frozen=True)
class Nodularity:
    amplitude: float   # N/m
    frequency: float   # 1/m
    seed: int


@dataclass(frozen=True)
class Lesion:
    center: tuple[float, float, float]  # local frame, on/near the surface
    radius: float                        # m
    stiffness: float                     # N/m


@dataclass(frozen=True)
class LiverPreset:
    condition: str
    scale: float
    k_base: float
    nodularity: Nodularity
    lesions: tuple[Lesion, ...]
    tenderness_threshold: float | None
    edge_rounding: int
    anatomy: AnatomyParams = ANATOMY["male"]

    @property
    def span(self) -> float:
        return self.scale * self.anatomy.span


@dataclass(frozen=True)
class TendernessEvent:
    magnitude: float  # N, amount by which |force| exceeded the threshold


@dataclass(frozen=True)
class DiagnosisResult:
    predicted: str
    scores: dict[str, float]
    features: tuple[float, float, float, float]  # k mean, k var, size, tenderness rate


def _anterior_height(x: float, y: float) -> float:
    """Approximate local-frame height of the anterior surface at (x, y)."""
    ax, ay, az = _LIVER_SEMI
    r2 = (x / ax) ** 2 + (y / ay) ** 2
    return az * 0.9 * math.sqrt(max(0.0, 1.0 - r2))


def make_preset(condition: str, seed: int = 0,
                anatomy: AnatomyParams = ANATOMY["male"]) -> LiverPreset:
    """Deterministic preset for (condition, seed)."""
    if condition not in CONDITIONS:
        raise PathologyError(f"unknown condition {condition!r}")
    base = dict(condition=condition, anatomy=anatomy,
                nodularity=Nodularity(0.0, 80.0, seed),
                lesions=(), tenderness_threshold=None, edge_rounding=0)
    if condition == "normal":
        return LiverPreset(scale=1.0, k_base=300.0, **base)
    if condition == "fatty":
        # enlarged with rounded edge
        return LiverPreset(scale=1.30, k_base=350.0,
                           **{**base, "edge_rounding": 3})
    if condition == "hepatitis":
        # enlarged and tender; stiffness stays near normal
        return LiverPreset(scale=1.22, k_base=310.0,
                           **{**base, "tenderness_threshold": 2.0})
    if condition == "cirrhosis":
        # enlarged with nodular irregularity
        return LiverPreset(scale=1.25, k_base=500.0,
                           **{**base, "nodularity": Nodularity(150.0, 80.0, seed)})
    # neoplasm: rock-hard focal lesions near seeded palpation sites
    rng = np.random.default_rng(seed ^ 0x5EED)
    picks = rng.choice(len(ANTERIOR_SITES), size=2, replace=False)
    lesions = []
    for p in picks:
        x, y = ANTERIOR_SITES[p]
        x += float(rng.uniform(-0.004, 0.004))
        y += float(rng.uniform(-0.004, 0.004))
        lesions.append(Lesion(center=(x, y, _anterior_height(x, y)),
                              radius=0.01, stiffness=2000.0))
    return LiverPreset(scale=1.20, k_base=340.0,
                       **{**base, "lesions": tuple(lesions)})


# ---------------------------------------------------------------------------
# value noise

_M = (1 << 64) - 1


def _lattice_value(ix: int, iy: int, iz: int, seed: int) -> float:
    """Hash a lattice corner to a uniform value in [-1, 1]."""
    h = (ix * 374761393 + iy * 668265263 + iz * 1274126177 + seed * 982451653) & _M
    h ^= h >> 13
    h = (h * 0x2545F4914F6CDD1D) & _M
    h ^= h >> 16
    return (h & 0xFFFFFF) / 8388607.5 - 1.0


def _smooth(t: float) -> float:
    return t * t * (3.0 - 2.0 * t)


def value_noise(x: float, y: float, z: float, seed: int) -> float:
    """Trilinear-interpolated seeded lattice noise in [-1, 1]."""
    ix, iy, iz = math.floor(x), math.floor(y), math.floor(z)
    fx, fy, fz = _smooth(x - ix), _smooth(y - iy), _smooth(z - iz)
    out = 0.0
    for dx in (0, 1):
        wx = fx if dx else 1.0 - fx
        for dy in (0, 1):
            wy = fy if dy else 1.0 - fy
            for dz in (0, 1):
                wz = fz if dz else 1.0 - fz
                out += wx * wy * wz * _lattice_value(ix + dx, iy + dy, iz + dz, seed)
    return out


def stiffness_at(preset: LiverPreset, q) -> float:
    """Surface stiffness (N/m) at local-frame point q. Constant-time,
    allocation-light; called from the 1 kHz loop."""
    qx, qy, qz = float(q[0]), float(q[1]), float(q[2])
    k = preset.k_base
    nod = preset.nodularity
    if nod.amplitude != 0.0:
        f = nod.frequency
        k += nod.amplitude * value_noise(qx * f, qy * f, qz * f, nod.seed)
    for lesion in preset.lesions:
        cx, cy, cz = lesion.center
        d2 = (qx - cx) ** 2 + (qy - cy) ** 2 + (qz - cz) ** 2
        k += (lesion.stiffness - preset.k_base) * math.exp(
            -d2 / (2.0 * lesion.radius ** 2))
    return k


def tenderness_check(preset: LiverPreset, force) -> TendernessEvent | None:
    """Emit an event iff the preset is tender and |force| exceeds the
    threshold (strict)."""
    if preset.tenderness_threshold is None:
        return None
    mag = float(np.linalg.norm(force))
    if mag > preset.tenderness_threshold:
        return TendernessEvent(magnitude=mag - preset.tenderness_threshold)
    return None


# ---------------------------------------------------------------------------
# edge rounding (fatty preset)


def apply_edge_rounding(mesh, iterations: int):
    """Umbrella-smooth the mesh's sharpest band for `iterations` rounds.

    The band is the top quintile of a per-vertex curvature proxy (mean
    angle between a vertex normal and its neighbors' normals), which on the
    liver asset is the crease along the inferior margin.
    """
    if iterations <= 0:
        return mesh
    from .geometry import compute_vertex_normals_raw

    tris = mesh.triangles
    n = mesh.n_vertices
    neighbors: list[set[int]] = [set() for _ in range(n)]
    for a, b, c in tris:
        neighbors[a].update((b, c))
        neighbors[b].update((a, c))
        neighbors[c].update((a, b))
    normals = mesh.vertex_normals
    rough = np.zeros(n)
    for v in range(n):
        if neighbors[v]:
            dots = [float(np.dot(normals[v], normals[w])) for w in neighbors[v]]
            rough[v] = np.arccos(np.clip(np.mean(dots), -1.0, 1.0))
    band = rough >= np.quantile(rough, 0.8)
    verts = mesh.vertices.copy()
    for _ in range(iterations):
        snapshot = verts.copy()
        for v in np.nonzero(band)[0]:
            ring = list(neighbors[v])
            verts[v] = 0.5 * snapshot[v] + 0.5 * snapshot[ring].mean(axis=0)
    return mesh.with_vertices(verts, recompute_normals=True)


# ---------------------------------------------------------------------------
# estimation and classification


def estimate_stiffness(trace, min_depth: float = 0.004) -> tuple[float, float]:
    """Least-squares slope (through the origin) of |force| vs depth over
    quasi-static contact samples deeper than min_depth.

    Returns (k_hat, rms residual). Raises InsufficientSamplesError below
    10 qualifying samples.
    """
    depths, mags = [], []
    for s in trace.samples:
        if s.contact is None or s.contact.depth <= min_depth:
            continue
        if float(np.linalg.norm(s.probe.velocity)) >= QUASI_STATIC_SPEED:
            continue
        depths.append(s.contact.depth)
        mags.append(float(np.linalg.norm(s.force)))
    if len(depths) < MIN_FIT_SAMPLES:
        raise InsufficientSamplesError(
            f"only {len(depths)} qualifying samples (need {MIN_FIT_SAMPLES})")
    d = np.asarray(depths)
    f = np.asarray(mags)
    k_hat = float(np.dot(d, f) / np.dot(d, d))
    residual = float(np.sqrt(np.mean((f - k_hat * d) ** 2)))
    return k_hat, residual


def trace_features(traces) -> tuple[float, float, float, float]:
    """(mean site stiffness, variance of site stiffness, size estimate,
    tenderness event rate) for one probing protocol run.

    The size estimate is the mean per-site contact-onset height (the
    highest probe z among contact samples, which is order-invariant). The
    tenderness rate is events per contact sample across all sites.
    """
    if len(traces) < 9:
        raise ProtocolError(f"probing protocol needs >= 9 sites, got {len(traces)}")
    k_hats = []
    heights = []
    events = 0
    contact_samples = 0
    for trace in traces:
        k_hat, _ = estimate_stiffness(trace)
        k_hats.append(k_hat)
        zs = [s.probe.position[2] for s in trace.samples if s.contact is not None]
        if not zs:
            raise ProtocolError("site trace has no contact samples")
        heights.append(max(zs))
        for s in trace.samples:
            if s.contact is not None:
                contact_samples += 1
                if "tenderness" in s.events:
                    events += 1
    k = np.asarray(k_hats)
    rate = events / contact_samples if contact_samples else 0.0
    return (float(k.mean()), float(k.var()), float(np.mean(heights)), rate)


def site_stiffnesses(traces) -> list[float]:
    return [estimate_stiffness(t)[0] for t in traces]


def load_calibration(path=None) -> dict[str, tuple[float, float, float, float]]:
    """Calibration centroid table: `condition k_mean k_var size
    tenderness_rate`, tab-separated, `#` comments, version line first."""
    if path is None:
        text = (importlib.resources.files("palpsim") / "data" / "calibration.tsv").read_text()
    else:
        text = open(path).read()
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines or not lines[0].startswith("version"):
        raise PathologyError("calibration table missing version line")
    version = lines[0].split("\t")[1]
    if version != "1":
        raise PathologyError(f"unsupported calibration version {version!r}")
    table = {}
    for ln in lines[1:]:
        parts = ln.split("\t")
        table[parts[0]] = tuple(float(x) for x in parts[1:5])
    missing = set(CONDITIONS) - set(table)
    if missing:
        raise PathologyError(f"calibration table missing conditions: {sorted(missing)}")
    return table


def save_calibration(table: dict[str, tuple[float, float, float, float]]) -> str:
    lines = ["# palpsim classifier calibration centroids",
             "# condition\tk_mean\tk_var\tsize\ttenderness_rate",
             "version\t1"]
    for cond in sorted(table):
        vals = "\t".join(f"{v:.17g}" for v in table[cond])
        lines.append(f"{cond}\t{vals}")
    return "\n".join(lines) + "\n"


def classify(traces, calibration=None) -> DiagnosisResult:
    """Nearest-centroid diagnosis over the four protocol features.

    Features are standardized by the spread of the centroid table itself;
    scores are normalized inverse distances; ties break lexicographically.
    """
    table = calibration if calibration is not None else load_calibration()
    feats = np.asarray(trace_features(traces))
    conds = sorted(table)
    centroids = np.asarray([table[c] for c in conds])
    scale = centroids.std(axis=0)
    scale[scale < 1e-12] = 1.0
    dists = np.linalg.norm((centroids - feats) / scale, axis=1)
    inv = 1.0 / (dists + 1e-12)
    scores = inv / inv.sum()
    best = int(np.argmax(scores))  # argmax returns the first (lexicographic) max
    return DiagnosisResult(
        predicted=conds[best],
        scores={c: float(s) for c, s in zip(conds, scores)},
        features=tuple(feats),
    )
