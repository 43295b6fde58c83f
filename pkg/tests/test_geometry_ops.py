import numpy as np
import pytest

from palpsim.geometry import (
    DecimationError,
    MeshAccel,
    closest_point_on_mesh,
    compute_vertex_normals,
    decimate,
    farthest_point_sample,
    make_mesh,
    surface_candidates,
)

from oracles import (
    brute_closest_on_mesh,
    greedy_fps,
    hausdorff_to_mesh,
    icosphere,
    min_pairwise_distance,
)


def ico_mesh(level, radius=1.0):
    v, f = icosphere(level, radius)
    return make_mesh(v, f)


# --- decimation ---------------------------------------------------------------

def test_decimate_noop_under_budget():
    m = ico_mesh(1)  # 80 triangles
    out = decimate(m, 200)
    assert out is m


def test_decimate_liver_to_budget(liver_full, liver_rt):
    assert liver_rt.n_triangles <= 3200
    liver_rt.validate()
    ext_in = liver_full.vertices.max(0) - liver_full.vertices.min(0)
    ext_out = liver_rt.vertices.max(0) - liver_rt.vertices.min(0)
    assert np.all(np.abs(ext_out / ext_in - 1.0) < 0.05)


def test_decimate_idempotent_triangle_count(liver_rt):
    again = decimate(liver_rt, 3200)
    assert again.n_triangles == liver_rt.n_triangles


def test_decimate_icosphere_hausdorff():
    m = ico_mesh(3)  # 1280 triangles
    out = decimate(m, 320)
    assert out.n_triangles <= 320
    diag = m.aabb().diagonal
    # dense sample both directions: result vertices vs input surface and
    # input vertices vs result surface
    d1 = hausdorff_to_mesh(out.vertices, m.vertices, m.triangles)
    rng = np.random.default_rng(0)
    subset = rng.choice(len(m.vertices), size=120, replace=False)
    d2 = hausdorff_to_mesh(m.vertices[subset], out.vertices, out.triangles)
    assert max(d1, d2) < 0.02 * diag


def test_decimate_target_too_small():
    with pytest.raises(DecimationError):
        decimate(ico_mesh(1), 3)


# --- normals --------------------------------------------------------------------

def test_quad_normals_planar():
    verts = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
    tris = np.array([[0, 1, 2], [0, 2, 3]])
    m = make_mesh(verts, tris)
    np.testing.assert_allclose(compute_vertex_normals(m), [[0, 0, 1]] * 4, atol=1e-12)


def test_tetrahedron_normals_match_face_sum():
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    tris = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    m = make_mesh(verts, tris)
    got = compute_vertex_normals(m)
    # oracle: explicit cross products, area weighting folded into the cross norm
    for vi in range(4):
        acc = np.zeros(3)
        for t in tris:
            if vi in t:
                a, b, c = verts[t[0]], verts[t[1]], verts[t[2]]
                acc = acc + 0.5 * np.cross(b - a, c - a)
        acc /= np.linalg.norm(acc)
        np.testing.assert_allclose(got[vi], acc, atol=1e-12)


def test_icosphere_normals_radial():
    m = ico_mesh(3)
    normals = compute_vertex_normals(m)
    radial = m.vertices / np.linalg.norm(m.vertices, axis=1, keepdims=True)
    cosang = np.einsum("ij,ij->i", normals, radial)
    assert np.all(cosang > np.cos(np.radians(2.0)))


def test_isolated_vertex_gets_z_normal(caplog):
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5]], dtype=float)
    tris = np.array([[0, 1, 2]])
    with caplog.at_level("WARNING", logger="palpsim.geometry"):
        m = make_mesh(verts, tris)
    np.testing.assert_array_equal(m.vertex_normals[3], [0, 0, 1])
    assert "isolated" in caplog.text


# --- closest point ----------------------------------------------------------------

def test_closest_point_at_vertex():
    m = ico_mesh(1)
    p = m.vertices[7]
    q, tri, d = closest_point_on_mesh(p, m)
    assert d == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(q, p, atol=1e-12)


def test_closest_point_above_quad():
    verts = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
    m = make_mesh(verts, np.array([[0, 1, 2], [0, 2, 3]]))
    h = 0.37
    q, tri, d = closest_point_on_mesh(np.array([0.5, 0.5, h]), m)
    assert d == pytest.approx(h, abs=1e-12)
    np.testing.assert_allclose(q, [0.5, 0.5, 0.0], atol=1e-12)


def test_closest_point_matches_bruteforce_oracle():
    v, f = icosphere(2)
    m = make_mesh(v, f[:200])  # 200-triangle open surface
    rng = np.random.default_rng(42)
    pts = rng.uniform(-2, 2, size=(100, 3))
    for p in pts:
        q, tri, d = closest_point_on_mesh(p, m)
        oq, otri, od = brute_closest_on_mesh(p, m.vertices, m.triangles)
        assert d == pytest.approx(od, abs=1e-9)
        np.testing.assert_allclose(q, oq, atol=1e-8)


def test_closest_point_is_lower_bound():
    # distance reported never exceeds the distance to any individual triangle
    m = ico_mesh(1)
    rng = np.random.default_rng(3)
    for p in rng.uniform(-1.5, 1.5, size=(20, 3)):
        _, _, d = closest_point_on_mesh(p, m)
        for t in m.triangles:
            from oracles import closest_on_triangle
            q = closest_on_triangle(p, *m.vertices[t])
            assert d <= np.linalg.norm(p - q) + 1e-12


def test_accel_matches_bruteforce(liver_rt):
    accel = MeshAccel(liver_rt)
    rng = np.random.default_rng(7)
    box = liver_rt.aabb()
    pts = rng.uniform(box.min - 0.05, box.max + 0.05, size=(50, 3))
    for p in pts:
        q1, t1, d1 = accel.closest_point(p)
        q2, t2, d2 = closest_point_on_mesh(p, liver_rt)
        assert t1 == t2
        assert d1 == d2
        np.testing.assert_array_equal(q1, q2)


def test_accel_far_reject_is_conservative(liver_rt):
    accel = MeshAccel(liver_rt)
    rng = np.random.default_rng(11)
    box = liver_rt.aabb()
    pts = rng.uniform(box.min - 0.1, box.max + 0.1, size=(200, 3))
    for p in pts:
        if accel.certainly_farther_than(p, 0.005):
            _, _, d = closest_point_on_mesh(p, liver_rt)
            assert d > 0.005


# --- farthest point sampling -----------------------------------------------------

def test_fps_single_point_seed_selected():
    m = ico_mesh(1)
    cands = surface_candidates(m)
    for seed in (0, 5, 12345):
        pts = farthest_point_sample(m, 1, seed=seed)
        np.testing.assert_array_equal(pts[0], cands[seed % len(cands)])


def test_fps_two_points_near_antipodal_on_sphere():
    m = ico_mesh(2)
    pts = farthest_point_sample(m, 2, seed=9)
    a = pts[0] / np.linalg.norm(pts[0])
    b = pts[1] / np.linalg.norm(pts[1])
    angle = np.degrees(np.arccos(np.clip(np.dot(a, b), -1, 1)))
    assert angle > 150.0


def test_fps_matches_reference_greedy(liver_rt):
    n = 64
    pts = farthest_point_sample(liver_rt, n, seed=17)
    cands = surface_candidates(liver_rt)
    ref_idx = greedy_fps(list(cands), n, 17 % len(cands))
    ref_pts = cands[ref_idx]
    assert min_pairwise_distance(pts) == min_pairwise_distance(ref_pts)
    np.testing.assert_array_equal(pts, ref_pts)


def test_fps_min_distance_monotone(liver_rt):
    pts = farthest_point_sample(liver_rt, 24, seed=1)
    prev = np.inf
    for k in range(2, 25):
        d = min_pairwise_distance(pts[:k])
        assert d <= prev + 1e-15
        prev = d


def test_fps_too_many_points():
    m = ico_mesh(0)
    with pytest.raises(Exception, match="candidates"):
        farthest_point_sample(m, 10_000, seed=0)
