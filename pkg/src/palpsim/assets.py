"""Procedural liver asset and the default scene bundle.

The trainer ships no scanned data; the liver is generated as a warped
ellipsoid with a right-to-left wedge taper, a flatter posterior face and a
crease along the inferior margin. Every value is a deterministic function
of the tessellation resolution, so regenerating the bundle always produces
identical files.

Run `python -m palpsim.assets <dir>` to write the default bundle
(full-resolution mesh, decimated real-time mesh, scene file, sample
trajectory).
"""

from __future__ import annotations

import sys

import numpy as np

from .geometry import TriMesh, decimate, make_mesh, save_obj

# local-frame semi-axes, meters: x transverse, y craniocaudal (the percussion
# span axis), z anterior-posterior (probing direction)
SEMI_AXES = (0.072, 0.050, 0.032)

REALTIME_TRIS = 3200  # triangle budget for the 1 kHz loop


def _sigmoid(t):
    return 1.0 / (1.0 + np.exp(-t))


def liver_mesh(target_tris: int = 40000) -> TriMesh:
    """Generate the liver surface at roughly target_tris triangles.

    UV-sphere tessellation (2 * slices * (stacks - 1) triangles) warped into
    a liver-like solid. Watertight, outward oriented, no degenerate faces.
    """
    slices = max(8, round(np.sqrt(target_tris / 2.0)))
    stacks = slices + 1

    theta = np.linspace(0.0, np.pi, stacks + 1)[1:-1]        # ring latitudes
    phi = np.linspace(0.0, 2.0 * np.pi, slices, endpoint=False)
    st, sp = np.sin(theta)[:, None], np.sin(phi)[None, :]
    ct, cp = np.cos(theta)[:, None], np.cos(phi)[None, :]
    ux = (st * cp).ravel()
    uy = (st * sp).ravel()
    uz = np.broadcast_to(ct, (len(theta), slices)).ravel()
    dirs = np.stack([ux, uy, uz], axis=1)
    dirs = np.vstack([[0.0, 0.0, 1.0], dirs, [0.0, 0.0, -1.0]])  # poles first/last

    verts = _warp(dirs)

    tris = []
    ring0 = 1  # vertex index of the first ring
    # top cap
    for j in range(slices):
        tris.append((0, ring0 + j, ring0 + (j + 1) % slices))
    # bands
    for i in range(len(theta) - 1):
        a = ring0 + i * slices
        b = a + slices
        for j in range(slices):
            jn = (j + 1) % slices
            tris.append((a + j, b + j, b + jn))
            tris.append((a + j, b + jn, a + jn))
    # bottom cap
    last = 1 + len(theta) * slices
    base = ring0 + (len(theta) - 1) * slices
    for j in range(slices):
        tris.append((last, base + (j + 1) % slices, base + j))
    return make_mesh(verts, np.array(tris, dtype=np.int64))


def _warp(dirs: np.ndarray) -> np.ndarray:
    """Map unit-sphere directions to liver surface points (local frame)."""
    ax, ay, az = SEMI_AXES
    # smooth lobe asymmetry applied radially before scaling
    lobe = 1.0 + 0.06 * dirs[:, 0] * dirs[:, 2] - 0.04 * dirs[:, 1] ** 2
    p = dirs * lobe[:, None] * np.array(SEMI_AXES)
    x, y, z = p[:, 0].copy(), p[:, 1].copy(), p[:, 2].copy()
    xn = x / ax
    # wedge: the organ thins toward its left (+x) extremity
    z *= 1.0 - 0.38 * _sigmoid(4.0 * (xn - 0.45))
    # flatter posterior face with a crease along the inferior margin;
    # the crease is the "edge" that the fatty preset rounds off
    z *= 1.0 - 0.18 * _sigmoid(-320.0 * z)
    # gentle transverse bend
    y += 0.010 * xn ** 2
    return np.stack([x, y, z], axis=1)


def realtime_liver_mesh(target_tris: int = REALTIME_TRIS) -> TriMesh:
    return decimate(liver_mesh(), target_tris)


def sample_press_trajectory(top_z: float, duration: float = 1.0) -> str:
    """Waypoint script: descend onto the anterior surface, hold, retract."""
    start = top_z + 0.02
    deep = top_z - 0.004
    lines = [
        f"0 0 0 {start:.6f}",
        f"{0.35 * duration:.6f} 0 0 {deep:.6f}",
        f"{0.80 * duration:.6f} 0 0 {deep:.6f}",
        f"{duration:.6f} 0 0 {start:.6f}",
    ]
    return "\n".join(lines) + "\n"


def write_default_bundle(out_dir) -> dict:
    """Write liver_40k.obj, liver.obj (decimated), liver.xml and press.txt.

    Returns the paths written. Imported lazily to keep geometry-only users
    free of the persistence module.
    """
    from pathlib import Path

    from .persistence import default_scene_document, save_scene

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    full = liver_mesh()
    small = decimate(full, REALTIME_TRIS)
    paths = {}
    paths["liver_40k"] = out / "liver_40k.obj"
    paths["liver_40k"].write_text(save_obj(full))
    paths["liver"] = out / "liver.obj"
    paths["liver"].write_text(save_obj(small))
    doc = default_scene_document(mesh_path="liver.obj")
    paths["scene"] = out / "liver.xml"
    paths["scene"].write_text(save_scene(doc))
    top_z = float(small.vertices[:, 2].max())
    paths["trajectory"] = out / "press.txt"
    paths["trajectory"].write_text(sample_press_trajectory(top_z))
    return paths


if __name__ == "__main__":
    target = sys.argv[1] if len(sys.argv) > 1 else "scenes"
    written = write_default_bundle(target)
    for name, path in written.items():
        print(f"{name}: {path}")
