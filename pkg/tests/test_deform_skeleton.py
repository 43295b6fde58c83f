from dataclasses import replace

import numpy as np
import pytest

from palpsim.deform import (
    DeformError,
    GelSkeleton,
    SpringLink,
    StabilityError,
    build_skeleton,
    check_stability,
    link_forces,
    mechanical_energy,
    spring_force,
    step_skeleton,
)
from palpsim.geometry import make_mesh

from oracles import (
    UnionFind,
    central_difference_gradient,
    damped_oscillator,
    icosphere,
    spring_energy,
)


def make_skeleton(positions, links, masses=None, anchored=None,
                  ks=300.0, kd=2.0, radii=None):
    positions = np.asarray(positions, dtype=float)
    n = len(positions)
    links = np.asarray(links, dtype=np.int64).reshape(-1, 2)
    rest = np.linalg.norm(positions[links[:, 1]] - positions[links[:, 0]], axis=1)
    return GelSkeleton(
        positions=positions.copy(),
        velocities=np.zeros_like(positions),
        masses=np.full(n, 0.01) if masses is None else np.asarray(masses, float),
        radii=np.full(n, 0.01) if radii is None else np.asarray(radii, float),
        anchored=np.zeros(n, bool) if anchored is None else np.asarray(anchored, bool),
        link_index=links,
        rest_lengths=rest,
        link_ks=np.full(len(links), ks),
        link_kd=np.full(len(links), kd),
        skin_nodes=np.zeros((0, 1), dtype=np.int64),
        skin_weights=np.zeros((0, 1)),
        build_positions=positions.copy(),
    )


def tetra_mesh():
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    tris = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return make_mesh(verts, tris)


# --- build_skeleton -------------------------------------------------------------

def test_build_four_nodes_complete_graph():
    # 4 nodes, 3-nearest each: forced complete graph, 6 unique links
    skel = build_skeleton(tetra_mesh(), 4, seed=0)
    assert skel.n_nodes == 4
    assert skel.n_links == 6
    assert np.all(skel.degrees() == 3)


def test_build_liver_skeleton_connected_min_degree(liver_rt):
    skel = build_skeleton(liver_rt, 64, seed=3)
    deg = skel.degrees()
    assert np.all(deg[~skel.anchored] >= 3)
    uf = UnionFind(skel.n_nodes)
    for a, b in skel.link_index:
        uf.union(int(a), int(b))
    assert uf.n_components() == 1
    assert skel.anchored.any()          # liver must be held somewhere
    assert not skel.anchored.all()


def test_build_rest_lengths_definitional(liver_rt):
    skel = build_skeleton(liver_rt, 32, seed=5)
    for e in range(skel.n_links):
        a, b = skel.link_index[e]
        d = np.linalg.norm(skel.positions[b] - skel.positions[a])
        assert abs(d - skel.rest_lengths[e]) < 1e-12


def test_build_radii_half_min_incident(liver_rt):
    skel = build_skeleton(liver_rt, 24, seed=1)
    for n in range(skel.n_nodes):
        incident = [skel.rest_lengths[e] for e in range(skel.n_links)
                    if n in skel.link_index[e]]
        assert skel.radii[n] == pytest.approx(0.5 * min(incident))


def test_build_deterministic(liver_rt):
    a = build_skeleton(liver_rt, 48, seed=9)
    b = build_skeleton(liver_rt, 48, seed=9)
    np.testing.assert_array_equal(a.positions, b.positions)
    np.testing.assert_array_equal(a.link_index, b.link_index)


# --- spring_force ----------------------------------------------------------------

def test_spring_force_at_rest_length_zero():
    link = SpringLink(0, 1, rest_length=1.0, ks=100.0, kd=5.0)
    pos = np.array([[0, 0, 0], [1, 0, 0]], dtype=float)
    vel = np.zeros((2, 3))
    f = spring_force(link, pos, vel)
    np.testing.assert_allclose(f.on_i, 0.0, atol=1e-15)
    assert not f.singular


def test_spring_force_stretch_pull():
    # ks=100, L0=0.1, |d|=0.12 static: 2 N pull on i along +x
    link = SpringLink(0, 1, rest_length=0.1, ks=100.0, kd=3.0)
    pos = np.array([[0, 0, 0], [0.12, 0, 0]])
    vel = np.zeros((2, 3))
    f = spring_force(link, pos, vel)
    np.testing.assert_allclose(f.on_i, [2.0, 0, 0], atol=1e-12)
    np.testing.assert_array_equal(f.on_i, -f.on_j)


def test_spring_force_equal_opposite_and_gradient():
    rng = np.random.default_rng(2)
    for _ in range(100):
        link = SpringLink(0, 1,
                          rest_length=float(rng.uniform(0.05, 0.3)),
                          ks=float(rng.uniform(50, 800)),
                          kd=float(rng.uniform(0, 5)))
        pos = rng.uniform(-0.5, 0.5, (2, 3))
        if np.linalg.norm(pos[1] - pos[0]) < 1e-3:
            pos[1] += 0.1
        vel = rng.uniform(-1, 1, (2, 3))
        f = spring_force(link, pos, vel)
        np.testing.assert_array_equal(f.on_i, -f.on_j)  # exact by construction
        # elastic part equals -dE/dx_i by central differences
        static = spring_force(link, pos, np.zeros((2, 3)))
        grad = central_difference_gradient(
            lambda xi: spring_energy(xi, pos[1], link.rest_length, link.ks), pos[0])
        denom = max(np.linalg.norm(grad), 1e-12)
        assert np.linalg.norm(static.on_i - (-grad)) / denom < 1e-6


def test_spring_force_coincident_singular():
    link = SpringLink(0, 1, rest_length=0.1, ks=100.0, kd=1.0)
    pos = np.zeros((2, 3))
    f = spring_force(link, pos, np.zeros((2, 3)))
    assert f.singular
    np.testing.assert_array_equal(f.on_i, 0.0)


# --- step_skeleton ----------------------------------------------------------------

def test_step_equilibrium_unchanged():
    skel = make_skeleton([[0, 0, 0], [0.1, 0, 0]], [[0, 1]])
    out = step_skeleton(skel, 1e-3)
    np.testing.assert_array_equal(out.positions, skel.positions)
    np.testing.assert_array_equal(out.velocities, 0.0)


def test_step_matches_damped_oscillator():
    # acceptance configuration: m=0.01 kg, ks=300 N/m, kd=0.2, x0=0.01 m
    m, ks, kd, x0 = 0.01, 300.0, 0.2, 0.01
    skel = make_skeleton(
        [[0, 0, 0], [0.1, 0, 0]], [[0, 1]],
        masses=[m, m], anchored=[True, False], ks=ks, kd=kd)
    displaced = skel.positions.copy()
    displaced[1, 0] += x0
    skel = replace(skel, positions=displaced)
    dt = 1e-3
    errs = []
    for n in range(1000):
        skel = step_skeleton(skel, dt)
        t = (n + 1) * dt
        got = skel.positions[1, 0] - 0.1
        errs.append(abs(got - damped_oscillator(t, m, ks, kd, x0)))
    assert max(errs) < 0.01 * x0


def test_step_anchored_bit_identical():
    rng = np.random.default_rng(4)
    pos = rng.uniform(-0.1, 0.1, (6, 3))
    links = [[i, (i + 1) % 6] for i in range(6)]
    skel = make_skeleton(pos, links, anchored=[True, False, True, False, False, False])
    before = skel.positions[skel.anchored].copy()
    out = step_skeleton(skel, 1e-3, external=rng.uniform(-1, 1, (6, 3)))
    np.testing.assert_array_equal(out.positions[out.anchored], before)
    np.testing.assert_array_equal(out.velocities[out.anchored], 0.0)


def test_step_momentum_conserved_free_network():
    rng = np.random.default_rng(6)
    pos = rng.uniform(-0.1, 0.1, (8, 3))
    links = [[i, j] for i in range(8) for j in range(i + 1, 8) if rng.random() < 0.5]
    skel = make_skeleton(pos, links)
    vel = rng.uniform(-0.5, 0.5, (8, 3))
    skel = replace(skel, velocities=vel)
    p0 = (skel.masses[:, None] * skel.velocities).sum(axis=0)
    for _ in range(50):
        skel = step_skeleton(skel, 1e-3)
    p1 = (skel.masses[:, None] * skel.velocities).sum(axis=0)
    assert np.linalg.norm(p1 - p0) <= 1e-9 * max(np.linalg.norm(p0), 1.0)


def test_step_energy_decays_with_damping(liver_rt):
    skel = build_skeleton(liver_rt, 32, seed=2, link_damping=2.0)
    # pluck: displace free nodes off equilibrium
    rng = np.random.default_rng(0)
    pos = skel.positions.copy()
    pos[~skel.anchored] += rng.uniform(-0.003, 0.003, pos[~skel.anchored].shape)
    skel = replace(skel, positions=pos)
    e0 = mechanical_energy(skel)
    for _ in range(1000):
        skel = step_skeleton(skel, 1e-3)
    assert mechanical_energy(skel) < e0


def test_step_energy_bounded_without_damping():
    m, ks, x0 = 0.01, 300.0, 0.01
    skel = make_skeleton([[0, 0, 0], [0.1, 0, 0]], [[0, 1]],
                         masses=[m, m], anchored=[True, False], ks=ks, kd=0.0)
    displaced = skel.positions.copy()
    displaced[1, 0] += x0
    skel = replace(skel, positions=displaced)
    e0 = mechanical_energy(skel)
    assert e0 > 0
    drift = 0.0
    for _ in range(1000):
        skel = step_skeleton(skel, 1e-3)
        drift = max(drift, abs(mechanical_energy(skel) - e0))
    assert drift <= 0.05 * e0


def test_step_deterministic():
    skel = make_skeleton([[0, 0, 0], [0.15, 0, 0]], [[0, 1]],
                         anchored=[True, False])
    a = b = skel
    for _ in range(100):
        a = step_skeleton(a, 1e-3)
        b = step_skeleton(b, 1e-3)
    np.testing.assert_array_equal(a.positions, b.positions)
    np.testing.assert_array_equal(a.velocities, b.velocities)


def test_step_kernel_matches_spring_force_reference():
    # one substep of the kernel vs a python KDK built on spring_force
    rng = np.random.default_rng(12)
    pos = rng.uniform(-0.1, 0.1, (5, 3))
    links = [[0, 1], [1, 2], [2, 3], [3, 4], [0, 4], [1, 3]]
    skel = make_skeleton(pos, links, kd=1.5)
    vel = rng.uniform(-0.2, 0.2, (5, 3))
    skel = replace(skel, velocities=vel)
    h = 1e-3

    def acc(p, v):
        f = np.zeros_like(p)
        for e in range(skel.n_links):
            link = skel.link(e)
            fp = spring_force(link, p, v)
            f[link.i] += fp.on_i
            f[link.j] += fp.on_j
        return f / skel.masses[:, None]

    p, v = pos.copy(), vel.copy()
    vh = v + 0.5 * h * acc(p, v)
    p2 = p + h * vh
    v2 = vh + 0.5 * h * acc(p2, vh)

    out = step_skeleton(skel, h, substeps=1)
    np.testing.assert_allclose(out.positions, p2, rtol=0, atol=1e-14)
    np.testing.assert_allclose(out.velocities, v2, rtol=0, atol=1e-13)


def test_step_rejects_nonfinite_external():
    skel = make_skeleton([[0, 0, 0], [0.1, 0, 0]], [[0, 1]])
    bad = np.zeros((2, 3))
    bad[0, 0] = np.nan
    with pytest.raises(DeformError, match="non-finite"):
        step_skeleton(skel, 1e-3, external=bad)


def test_stability_guard():
    skel = make_skeleton([[0, 0, 0], [0.1, 0, 0]], [[0, 1]],
                         masses=[1e-9, 1e-9], ks=1e6)
    with pytest.raises(StabilityError):
        check_stability(skel, 1e-3)
    ok = make_skeleton([[0, 0, 0], [0.1, 0, 0]], [[0, 1]])
    check_stability(ok, 1e-3)  # must not raise
