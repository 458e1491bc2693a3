from __future__ import annotations

import numpy as np
import pytest

from icet.geometry import STATE_NAMES, StateVector, state_from_matrix, transform_array
from icet.harness import (
    CampaignConfig, run_monte_carlo, run_odometry, run_resolution_sweep, run_trials,
    stitch_map, summarize, trial_streams,
)
from icet.scenes import SceneSpec, sample_scene, straight_sequence
from icet.solver import SolverConfig

FAST = SceneSpec(kind="t_intersection", el_step=1.0)
STILL = SceneSpec(kind="t_intersection", el_step=1.0, noise_sigma=0.0)


def test_zero_error_trivial_campaign():
    res = run_monte_carlo(STILL, 1, truth=StateVector(), sigma_translation=0.0, sigma_rotation=0.0)
    s = res.summary
    assert s["n_converged"] == 1
    for name in STATE_NAMES:
        assert s["states"][name]["rmse"] == 0.0


def test_jobs_do_not_change_results():
    cfg = CampaignConfig(scene=FAST, n_trials=3, seed=5)
    serial = run_trials(cfg, jobs=1)
    parallel = run_trials(cfg, jobs=2)
    assert [r.to_row() for r in serial] == [r.to_row() for r in parallel]


def test_summary_reproducible_and_census():
    a = run_monte_carlo(FAST, 4, seed=9)
    b = run_monte_carlo(FAST, 4, seed=9)
    assert a.rows() == b.rows()
    assert repr(a.summary) == repr(b.summary)
    s = a.summary
    assert s["n_converged"] + s["n_nonconverged"] + s["n_failed"] == 4
    assert sum(s["dnu_patterns"].values()) == s["n_converged"]


def test_trial_streams_differ():
    _, r0, n0 = trial_streams(0, 0)
    _, r1, n1 = trial_streams(0, 1)
    assert len({r0, n0, r1, n1}) == 4


def test_dnu_excluded_from_rmse():
    cfg = CampaignConfig(scene=SceneSpec(kind="tunnel", el_step=1.0), n_trials=2, seed=1)
    s = summarize(run_trials(cfg))
    assert s["states"]["y"]["n_used"] == 0
    assert s["states"]["y"]["dnu_count"] == 2
    assert s["table"]["rmse"][1] == "DNU"
    assert np.isfinite(s["states"]["x"]["rmse"])


def test_campaign_config_validation():
    with pytest.raises(ValueError):
        CampaignConfig(scene=FAST, n_trials=0)
    with pytest.raises(ValueError):
        CampaignConfig(scene=FAST, n_trials=1, algo="icp")


def test_sweep_rows():
    rows = run_resolution_sweep(STILL, [4.0], n_trials=1, truth=StateVector(),
                                sigma_translation=0.0, sigma_rotation=0.0)
    assert len(rows) == 1
    assert rows[0]["mae_translation"] == 0.0 and rows[0]["resolution_deg"] == 4.0
    rows = run_resolution_sweep(FAST, [3.5, 5.0, 7.0], n_trials=1)
    assert [r["resolution_deg"] for r in rows] == [3.5, 5.0, 7.0]


def test_sweep_rejects_out_of_range():
    with pytest.raises(ValueError):
        run_resolution_sweep(FAST, [0.5], n_trials=1)


def test_odometry_identical_scans():
    scan = sample_scene(FAST)
    frames = run_odometry([scan, scan])
    assert frames[0].status == "origin"
    assert np.abs(frames[1].delta.as_array()).max() < 1e-12
    with pytest.raises(ValueError):
        run_odometry([scan])


@pytest.fixture(scope="module")
def straight_run():
    step = StateVector(x=0.01)
    scans, truths = straight_sequence(FAST, 11, step, seed=3)
    return scans, truths, run_odometry(scans)


def test_accumulated_translation(straight_run):
    _, _, frames = straight_run
    chain = state_from_matrix(frames[-1].pose)
    sig = np.sqrt(sum(f.sigmas[0] ** 2 for f in frames[1:]))
    assert abs(chain.x - 0.10) <= 3 * sig
    assert all(f.status == "ok" for f in frames[1:])


def test_two_sigma_containment():
    step = StateVector(0.01, 0.02, 0.0, 0.0, 0.0, 0.002)
    scans, truths = straight_sequence(FAST, 21, step, seed=4)
    frames = run_odometry(scans)
    inside = []
    for f, t in zip(frames[1:], truths[1:]):
        err = f.delta.as_array() - t.as_array()
        inside += list(np.abs(err) <= 2 * f.sigmas)
    assert np.mean(inside) >= 0.9


def test_stitch_single_and_doubled():
    scan = sample_scene(FAST)
    one = stitch_map([scan], [np.eye(4)])
    assert np.array_equal(one.points, scan.points)
    two = stitch_map([scan, scan], [np.eye(4), np.eye(4)])
    assert len(two) == 2 * len(scan)
    assert np.array_equal(two.points[len(scan):], scan.points)


def test_stitched_wall_thickness(straight_run):
    scans, _, frames = straight_run
    cloud = stitch_map(scans, [f.pose for f in frames])
    p = cloud.points
    # left wall of the street, away from corners
    sel = (np.abs(p[:, 0] + 6.0) < 0.05) & (p[:, 1] > -20) & (p[:, 1] < 10) & (p[:, 2] > -1) & (p[:, 2] < 5)
    wall = p[sel]
    assert len(wall) > 1000
    centered = wall - wall.mean(axis=0)
    normal = np.linalg.svd(centered, full_matrices=False)[2][-1]
    rms = np.sqrt(np.mean((centered @ normal) ** 2))
    assert rms <= 3 * FAST.noise_sigma


def test_stitch_matches_transform(straight_run):
    scans, _, frames = straight_run
    cloud = stitch_map(scans[:2], [frames[0].pose, frames[1].pose])
    moved = transform_array(scans[1].points, frames[1].delta)
    assert np.allclose(cloud.points[len(scans[0]):], moved, atol=1e-12)


def test_odometry_rows(straight_run):
    _, _, frames = straight_run
    row = frames[3].to_row()
    assert row["frame"] == 3 and row["status"] == "ok"
    assert row["pose_x"] == pytest.approx(0.03, abs=1e-3)


def test_solver_config_passed_through():
    cfg = CampaignConfig(scene=FAST, n_trials=1, algo="ndt", solver=SolverConfig(max_iterations=1))
    rec = run_trials(cfg)[0]
    assert rec.iterations <= 2
