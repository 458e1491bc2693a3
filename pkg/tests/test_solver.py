from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icet.geometry import StateVector
from icet.harness import inject_moving_cluster, voxel_center_direction
from icet.refinement import ProjectedGroup
from icet.scenes import SceneSpec, sample_scene, scene_pair
from icet.solver import (
    FullyUnobservableError, SolverConfig, UnregistrableScanError, accumulate_groups,
    accumulate_normal_equations, condition_screen, predicted_sigmas, register,
    solve_step, voxel_jacobians,
)
from icet.voxelgrid import GridConfig

GRID = GridConfig()
SPEC = SceneSpec(kind="t_intersection", el_step=1.0, seed=11)


def dense_normal_equations(rec):
    """Stack every voxel's operands into one measurement model with a
    block-diagonal weight matrix and assemble A and b directly."""
    H = np.vstack(rec.H)
    dy = np.concatenate(rec.dy)
    m = dy.size
    W = np.zeros((m, m))
    i = 0
    for s in rec.sigma:
        k = s.shape[0]
        W[i:i + k, i:i + k] = np.linalg.inv(s)
        i += k
    return H.T @ W @ H, H.T @ W @ dy


@pytest.fixture(scope="module")
def tint_run():
    ref, new = scene_pair(SPEC, StateVector(0.02, -0.03, 0.01, 0.002, -0.001, 0.01))
    records = []
    report = register(ref, new, GRID, SolverConfig(), callback=records.append)
    return ref, new, report, records


def test_single_voxel_identity_weights():
    H = np.random.default_rng(0).normal(size=(3, 6))
    dy = np.array([0.1, -0.2, 0.05])
    A, b = accumulate_normal_equations([(H, dy, np.eye(3))])
    assert np.allclose(A, H.T @ H, atol=1e-14)
    assert np.allclose(b, H.T @ dy, atol=1e-14)


def test_random_voxels_match_dense():
    g = np.random.default_rng(1)
    meas = []
    for _ in range(50):
        k = int(g.integers(1, 4))
        a = g.normal(size=(k, k))
        meas.append((g.normal(size=(k, 6)), g.normal(size=k), a @ a.T + 0.1 * np.eye(k)))
    A, b = accumulate_normal_equations(meas)

    class Rec:
        H = [m[0] for m in meas]
        dy = [m[1] for m in meas]
        sigma = [m[2] for m in meas]

    Ad, bd = dense_normal_equations(Rec)
    assert np.abs(A - Ad).max() <= 1e-9 * np.abs(Ad).max()
    assert np.abs(b - bd).max() <= 1e-9 * np.abs(bd).max()


def test_grouped_accumulation_matches_loop():
    g = np.random.default_rng(2)
    groups, meas = [], []
    for k, idx in ((3, np.array([0, 3, 4])), (2, np.array([1, 5])), (1, np.array([2]))):
        H = g.normal(size=(idx.size, k, 6))
        dy = g.normal(size=(idx.size, k))
        a = g.normal(size=(idx.size, k, k))
        S = a @ np.swapaxes(a, 1, 2) + np.eye(k)
        groups.append(ProjectedGroup(idx, H, dy, S))
        meas += [(pos, H[j], dy[j], S[j]) for j, pos in enumerate(idx)]
    meas.sort(key=lambda m: m[0])
    A, b = accumulate_groups(groups, 6)
    A2, b2 = accumulate_normal_equations([m[1:] for m in meas])
    assert np.allclose(A, A2, rtol=1e-12, atol=1e-12)
    assert np.allclose(b, b2, rtol=1e-12, atol=1e-12)


def test_translation_block_is_negative_identity():
    H = voxel_jacobians(np.random.default_rng(3).normal(size=(10, 3)), StateVector(0, 0, 0, 0.1, 0.2, 0.3))
    assert np.array_equal(H[:, :, :3], np.broadcast_to(-np.eye(3), (10, 3, 3)))


def test_recorded_iterations_match_dense(tint_run):
    _, _, _, records = tint_run
    assert len(records) >= 2
    for rec in records:
        assert len(rec.H) >= 50
        Ad, bd = dense_normal_equations(rec)
        assert np.abs(rec.A - Ad).max() <= 1e-9 * np.abs(Ad).max()
        assert np.abs(rec.b - bd).max() <= 1e-9 * np.abs(bd).max()


def test_screen_identity():
    scr = condition_screen(np.eye(6))
    assert scr.removed == [] and not scr.dnu_flags.any()


def test_screen_flags_weak_state():
    scr = condition_screen(np.diag([1, 1e-9, 1, 1, 1, 1]), t_cond=5e4)
    assert len(scr.removed) == 1
    assert scr.dnu_flags.tolist() == [False, True, False, False, False, False]


def test_screen_rejects_zero_matrix():
    with pytest.raises(FullyUnobservableError):
        condition_screen(np.zeros((6, 6)))


def random_spd(seed, cond=1e3):
    g = np.random.default_rng(seed)
    q, _ = np.linalg.qr(g.normal(size=(6, 6)))
    return (q * np.geomspace(1.0, cond, 6)) @ q.T


def test_step_matches_dense_solve():
    A = random_spd(4)
    b = np.random.default_rng(5).normal(size=6)
    dx = solve_step(condition_screen(A), b)
    assert np.abs(dx - np.linalg.solve(A, b)).max() < 1e-10


def test_step_has_no_component_along_removed():
    A = random_spd(6, cond=1e8)
    scr = condition_screen(A, t_cond=5e4)
    assert len(scr.removed) >= 1
    dx = solve_step(scr, np.random.default_rng(7).normal(size=6))
    for v in scr.removed:
        assert abs(v @ dx) < 1e-12


def test_zero_rhs():
    assert np.array_equal(solve_step(condition_screen(random_spd(8)), np.zeros(6)), np.zeros(6))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1.0, 12.0))
def test_screen_leaves_well_conditioned_basis(seed, log_cond):
    scr = condition_screen(random_spd(seed, 10.0 ** log_cond), t_cond=5e4)
    assert scr.eigvals[-1] <= 5e4 * scr.eigvals[0]
    assert scr.basis.shape[1] + len(scr.removed) == 6
    assert np.allclose(scr.basis.T @ scr.basis, np.eye(scr.basis.shape[1]), atol=1e-10)


def test_identical_scans_fixed_point():
    cloud = sample_scene(SPEC)
    rep = register(cloud, cloud, GRID)
    assert rep.converged and rep.iterations_used <= 2
    assert np.abs(rep.estimate.as_array()).max() < 1e-12
    assert rep.voxels_rejected_moving == 0


def test_recovers_one_centimeter_shift():
    truth = StateVector(x=0.01)
    ref, new = scene_pair(SPEC, truth)
    rep = register(ref, new, GRID)
    sig = predicted_sigmas(rep)
    assert rep.converged and not rep.dnu_flags.any()
    assert np.all(np.abs(rep.estimate.as_array() - truth.as_array()) <= 3 * sig)


def test_moving_cluster_rejected():
    truth = StateVector(0.01, 0.03, 0.0, 0.0, 0.0, 0.01)
    ref, new = scene_pair(SPEC, truth)
    center = 20.0 * voxel_center_direction(GRID, 22, 6)
    tangent = np.cross(center, [0.0, 0.0, 1.0])
    tangent *= 0.2 / np.linalg.norm(tangent)
    ref2, new2 = inject_moving_cluster(ref, new, truth, center, tangent, seed=1)
    clean = register(ref, new, GRID)
    moved = register(ref2, new2, GRID)
    assert moved.voxels_rejected_moving >= clean.voxels_rejected_moving + 1
    sig = predicted_sigmas(clean)
    assert np.all(np.abs(moved.estimate.as_array() - clean.estimate.as_array()) < 3 * sig)


def test_report_covariance(tint_run):
    _, _, rep, _ = tint_run
    assert np.array_equal(rep.P, rep.P.T)
    assert np.all(np.linalg.eigvalsh(rep.P) > 0)
    assert np.allclose(predicted_sigmas(rep) ** 2, np.diag(rep.P))
    assert rep.voxels_used <= rep.voxels_used_before_rejection


def test_dnu_state_serializes_as_null():
    spec = SceneSpec(kind="tunnel", el_step=1.0, seed=2)
    ref, new = scene_pair(spec, StateVector(0.02, 0.05, 0.0, 0.0, 0.0, 0.005))
    rep = register(ref, new, GRID)
    assert rep.dnu_states == ["y"]
    data = json.loads(rep.to_json())
    assert data["predicted_sigmas"]["y"] is None
    assert data["P"][1] == [None] * 6
    assert data["predicted_sigmas"]["x"] > 0
    assert np.isnan(predicted_sigmas(rep)[1])


def test_predicted_sigmas_identity():
    class Rep:
        P = np.eye(6)
        dnu_flags = np.zeros(6, bool)

    assert np.array_equal(predicted_sigmas(Rep), np.ones(6))


def test_deterministic(tint_run):
    ref, new, rep, _ = tint_run
    again = register(ref, new, GRID, SolverConfig())
    assert again.to_json() == rep.to_json()
    assert np.array_equal(again.P, rep.P)


def test_ndt_mode_keeps_all_axes(tint_run):
    ref, new, rep, _ = tint_run
    ndt = register(ref, new, GRID, SolverConfig(refinement_enabled=False))
    assert ndt.voxels_excluded_axes == 0
    assert rep.voxels_excluded_axes > 0


def test_unregistrable():
    ref = sample_scene(SPEC)
    far = ref.points + [500.0, 0.0, 0.0]
    with pytest.raises(UnregistrableScanError):
        register(ref, far, GRID)
    with pytest.raises(UnregistrableScanError):
        register(np.zeros((10, 3)) + 5.0, ref, GRID)


@pytest.mark.parametrize("kwargs", [
    {"t_cond": 1.0}, {"t_mod": 0.0}, {"max_iterations": 0},
])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        SolverConfig(**kwargs)
