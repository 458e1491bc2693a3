"""Monte Carlo campaigns, voxel-resolution sweeps and scan-sequence odometry.

Seeding
-------
Every trial draws from its own stream ``SeedSequence(seed, spawn_key=(trial,))``,
split into three children: initial-guess draw, reference-scan noise and
new-scan noise.  A trial therefore reproduces bit-exactly on its own, in any
order and in any worker process.

Statistics
----------
``rmse`` is computed over converged trials in which the state was not flagged
do-not-use (DNU).  ``rmse_all`` also includes converged trials where the state
was flagged; it measures the raw output error of states that an algorithm did
not solve for.  A failed trial (solver exception) never aborts a campaign.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Literal, Sequence

import numpy as np

from .geometry import STATE_NAMES, StateVector, state_from_matrix, state_to_matrix
from .pointcloud_io import PointCloud
from .scenes import DEFAULT_TRUTH, SceneSpec, scene_pair
from .solver import RegistrationError, SolverConfig, predicted_sigmas, register
from .voxelgrid import GridConfig

logger = logging.getLogger(__name__)

Algo = Literal["icet", "ndt"]
ALGOS: tuple[str, ...] = ("icet", "ndt")

# initial-guess error, one sigma per axis
GUESS_SIGMA_TRANSLATION = 0.125
GUESS_SIGMA_ROTATION = math.radians(1.7)


def solver_for(algo: str, base: SolverConfig | None = None) -> SolverConfig:
    if algo not in ALGOS:
        raise ValueError(f"unknown algorithm {algo!r}; expected one of {ALGOS}")
    return replace(base or SolverConfig(), refinement_enabled=(algo == "icet"))


def trial_streams(seed: int, trial: int) -> tuple[np.random.Generator, int, int]:
    """Generator for the initial guess plus integer seeds for the two scans."""
    ss = np.random.SeedSequence(seed, spawn_key=(trial,))
    guess_ss, ref_ss, new_ss = ss.spawn(3)
    ref_seed = int(ref_ss.generate_state(1, dtype=np.uint64)[0])
    new_seed = int(new_ss.generate_state(1, dtype=np.uint64)[0])
    return np.random.default_rng(guess_ss), ref_seed, new_seed


def draw_initial_guess(
    truth: StateVector,
    rng: np.random.Generator,
    sigma_translation: float = GUESS_SIGMA_TRANSLATION,
    sigma_rotation: float = GUESS_SIGMA_ROTATION,
) -> StateVector:
    sd = np.array([sigma_translation] * 3 + [sigma_rotation] * 3)
    return StateVector.from_array(truth.as_array() + rng.normal(0.0, 1.0, 6) * sd)


@dataclass(frozen=True)
class CampaignConfig:
    scene: SceneSpec
    n_trials: int
    algo: str = "icet"
    seed: int = 0
    truth: StateVector = DEFAULT_TRUTH
    grid: GridConfig = field(default_factory=GridConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    sigma_translation: float = GUESS_SIGMA_TRANSLATION
    sigma_rotation: float = GUESS_SIGMA_ROTATION

    def __post_init__(self) -> None:
        if self.n_trials < 1:
            raise ValueError("n_trials must be at least 1")
        if self.algo not in ALGOS:
            raise ValueError(f"unknown algorithm {self.algo!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["truth"] = self.truth.to_dict()
        d["solver"].pop("initial_guess")
        return d


@dataclass(frozen=True, eq=False)
class TrialRecord:
    trial: int
    truth: StateVector
    initial_guess: StateVector
    estimate: StateVector | None
    sigmas: np.ndarray                  # NaN where DNU or failed
    dnu_flags: np.ndarray
    iterations: int
    converged: bool
    status: str                         # "ok", "nonconverged" or "failed"
    message: str = ""
    voxels_used: int = 0
    voxels_rejected_moving: int = 0
    wall_time: float = 0.0

    @property
    def error(self) -> np.ndarray:
        if self.estimate is None:
            return np.full(6, np.nan)
        return self.estimate.as_array() - self.truth.as_array()

    def fallback_error(self) -> np.ndarray:
        """Error of the pose the pipeline would output: the initial guess
        when registration failed."""
        if self.estimate is None:
            return self.initial_guess.as_array() - self.truth.as_array()
        return self.error

    def to_row(self) -> dict:
        """CSV row; wall time is left out so artifacts stay deterministic."""
        row: dict = {"trial": self.trial, "status": self.status}
        err = self.error
        est = self.estimate.as_array() if self.estimate is not None else np.full(6, np.nan)
        for i, n in enumerate(STATE_NAMES):
            row[f"truth_{n}"] = self.truth.as_array()[i]
        for i, n in enumerate(STATE_NAMES):
            row[f"guess_{n}"] = self.initial_guess.as_array()[i]
        for i, n in enumerate(STATE_NAMES):
            row[f"est_{n}"] = est[i]
        for i, n in enumerate(STATE_NAMES):
            row[f"err_{n}"] = err[i]
        for i, n in enumerate(STATE_NAMES):
            row[f"sigma_{n}"] = self.sigmas[i]
        for i, n in enumerate(STATE_NAMES):
            row[f"dnu_{n}"] = bool(self.dnu_flags[i])
        row["iterations"] = self.iterations
        row["converged"] = self.converged
        row["voxels_used"] = self.voxels_used
        row["voxels_rejected_moving"] = self.voxels_rejected_moving
        row["message"] = self.message
        return row


def run_trial(cfg: CampaignConfig, trial: int) -> TrialRecord:
    rng, ref_seed, new_seed = trial_streams(cfg.seed, trial)
    guess = draw_initial_guess(cfg.truth, rng, cfg.sigma_translation, cfg.sigma_rotation)
    scfg = replace(solver_for(cfg.algo, cfg.solver), initial_guess=guess)
    t0 = time.perf_counter()
    try:
        ref, new = scene_pair(cfg.scene, cfg.truth, (ref_seed, new_seed))
        rep = register(ref, new, cfg.grid, scfg)
    except RegistrationError as exc:
        logger.warning("trial %d failed: %s", trial, exc)
        return TrialRecord(
            trial=trial, truth=cfg.truth, initial_guess=guess, estimate=None,
            sigmas=np.full(6, np.nan), dnu_flags=np.zeros(6, dtype=bool),
            iterations=0, converged=False, status="failed", message=str(exc),
            wall_time=time.perf_counter() - t0,
        )
    return TrialRecord(
        trial=trial, truth=cfg.truth, initial_guess=guess, estimate=rep.estimate,
        sigmas=predicted_sigmas(rep), dnu_flags=rep.dnu_flags.copy(),
        iterations=rep.iterations_used, converged=rep.converged,
        status="ok" if rep.converged else "nonconverged",
        voxels_used=rep.voxels_used, voxels_rejected_moving=rep.voxels_rejected_moving,
        wall_time=time.perf_counter() - t0,
    )


def _trial_job(args: tuple[CampaignConfig, int]) -> TrialRecord:
    return run_trial(*args)


def run_trials(cfg: CampaignConfig, jobs: int = 1) -> list[TrialRecord]:
    """All trials of ``cfg`` sorted by trial id; results do not depend on ``jobs``."""
    work = [(cfg, k) for k in range(cfg.n_trials)]
    if jobs <= 1:
        records = [_trial_job(w) for w in work]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_trial_job, work, chunksize=max(1, len(work) // (4 * jobs))))
    records.sort(key=lambda r: r.trial)
    return records


def _rms(values: np.ndarray) -> float:
    return float(np.sqrt(np.mean(values ** 2))) if values.size else math.nan


def summarize(records: Sequence[TrialRecord]) -> dict:
    """Per-state table (RMSE vs. mean predicted sigma) and trial census."""
    ok = [r for r in records if r.status == "ok"]
    n_non = sum(r.status == "nonconverged" for r in records)
    n_fail = sum(r.status == "failed" for r in records)
    states = {}
    for i, name in enumerate(STATE_NAMES):
        used = [r for r in ok if not r.dnu_flags[i]]
        err = np.array([r.error[i] for r in used])
        err_all = np.array([r.error[i] for r in ok])
        sig = np.array([r.sigmas[i] for r in used])
        rmse = _rms(err)
        pred = float(np.mean(sig)) if sig.size else math.nan
        states[name] = {
            "rmse": rmse,
            "predicted": pred,
            "ratio": pred / rmse if sig.size and rmse > 0 else math.nan,
            "mean_error": float(np.mean(err)) if err.size else math.nan,
            "rmse_all": _rms(err_all),
            "n_used": len(used),
            "dnu_count": len(ok) - len(used),
        }
    iters = np.array([r.iterations for r in records if r.status != "failed"])
    # same layout as a results table: one row per statistic, "DNU" where no trial solved the state
    table = {
        "columns": list(STATE_NAMES),
        "rmse": [states[n]["rmse"] if states[n]["n_used"] else "DNU" for n in STATE_NAMES],
        "predicted": [states[n]["predicted"] if states[n]["n_used"] else "DNU" for n in STATE_NAMES],
    }
    return {
        "n_trials": len(records),
        "n_converged": len(ok),
        "n_nonconverged": n_non,
        "n_failed": n_fail,
        "mean_iterations": float(iters.mean()) if iters.size else math.nan,
        "dnu_patterns": _dnu_patterns(ok),
        "states": states,
        "table": table,
    }


def _dnu_patterns(records: Iterable[TrialRecord]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for r in records:
        key = ",".join(n for n, f in zip(STATE_NAMES, r.dnu_flags) if f) or "none"
        counts[key] = counts.get(key, 0) + 1
    return dict(sorted(counts.items()))


@dataclass(frozen=True, eq=False)
class CampaignResult:
    config: CampaignConfig
    records: list[TrialRecord]
    summary: dict

    def rows(self) -> list[dict]:
        return [r.to_row() for r in self.records]


def run_monte_carlo(
    scene: SceneSpec,
    n_trials: int,
    algo: str = "icet",
    seed: int = 0,
    *,
    truth: StateVector = DEFAULT_TRUTH,
    grid_cfg: GridConfig | None = None,
    solver_cfg: SolverConfig | None = None,
    jobs: int = 1,
    sigma_translation: float = GUESS_SIGMA_TRANSLATION,
    sigma_rotation: float = GUESS_SIGMA_ROTATION,
) -> CampaignResult:
    cfg = CampaignConfig(
        scene=scene, n_trials=n_trials, algo=algo, seed=seed, truth=truth,
        grid=grid_cfg or GridConfig(), solver=solver_cfg or SolverConfig(),
        sigma_translation=sigma_translation, sigma_rotation=sigma_rotation,
    )
    records = run_trials(cfg, jobs)
    summary = summarize(records)
    summary["scene"] = scene.kind
    summary["algo"] = algo
    summary["seed"] = seed
    return CampaignResult(cfg, records, summary)


def run_resolution_sweep(
    scene: SceneSpec,
    resolutions: Sequence[float],
    n_trials: int = 30,
    seed: int = 0,
    *,
    algo: str = "icet",
    truth: StateVector = DEFAULT_TRUTH,
    grid_cfg: GridConfig | None = None,
    solver_cfg: SolverConfig | None = None,
    jobs: int = 1,
    sigma_translation: float = GUESS_SIGMA_TRANSLATION,
    sigma_rotation: float = GUESS_SIGMA_ROTATION,
) -> list[dict]:
    """Mean absolute translation error for each angular resolution.

    Every resolution replays the same trials (same guesses and noise).  A
    failed registration is scored at its initial-guess error, which is what
    the pipeline would output in its place.
    """
    for res in resolutions:
        if not 1.0 < res < 30.0:
            raise ValueError(f"resolution {res} deg outside (1, 30)")
    base = grid_cfg or GridConfig()
    rows = []
    for res in resolutions:
        cfg = CampaignConfig(
            scene=scene, n_trials=n_trials, algo=algo, seed=seed, truth=truth,
            grid=replace(base, angular_resolution=float(res)),
            solver=solver_cfg or SolverConfig(),
            sigma_translation=sigma_translation, sigma_rotation=sigma_rotation,
        )
        records = run_trials(cfg, jobs)
        err = np.array([r.fallback_error()[:3] for r in records])
        ok = [r for r in records if r.status == "ok"]
        err_ok = np.array([r.error[:3] for r in ok]).reshape(-1, 3)
        rows.append({
            "resolution_deg": float(res),
            "n_trials": n_trials,
            "n_failed": sum(r.status == "failed" for r in records),
            "n_nonconverged": sum(r.status == "nonconverged" for r in records),
            "mae_translation": float(np.mean(np.abs(err))),
            "mae_translation_converged": float(np.mean(np.abs(err_ok))) if ok else math.nan,
            "mean_iterations": float(np.mean([r.iterations for r in records])),
        })
        logger.info("resolution %.2f deg: mae %.3g m", res, rows[-1]["mae_translation"])
    return rows


# --- odometry -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class OdometryFrame:
    frame: int
    delta: StateVector                  # maps frame k into frame k-1
    sigmas: np.ndarray
    dnu_flags: np.ndarray
    iterations: int
    converged: bool
    status: str                         # "ok", "nonconverged", "failed", "origin"
    pose: np.ndarray                    # 4x4, maps frame k into frame 0
    voxels_used: int = 0
    voxels_rejected_moving: int = 0
    message: str = ""

    def to_row(self) -> dict:
        row: dict = {"frame": self.frame, "status": self.status}
        for n, v in zip(STATE_NAMES, self.delta.as_array()):
            row[n] = v
        for n, v in zip(STATE_NAMES, self.sigmas):
            row[f"sigma_{n}"] = v
        for n, f in zip(STATE_NAMES, self.dnu_flags):
            row[f"dnu_{n}"] = bool(f)
        chain = state_from_matrix(self.pose)
        for n, v in zip(STATE_NAMES, chain.as_array()):
            row[f"pose_{n}"] = v
        row["iterations"] = self.iterations
        row["converged"] = self.converged
        row["voxels_used"] = self.voxels_used
        row["voxels_rejected_moving"] = self.voxels_rejected_moving
        row["message"] = self.message
        return row


def run_odometry(
    scans: Sequence[PointCloud],
    grid_cfg: GridConfig | None = None,
    solver_cfg: SolverConfig | None = None,
) -> list[OdometryFrame]:
    """Register every consecutive pair and chain the increments.

    A failed pair contributes the identity and is flagged in ``status``.
    """
    if len(scans) < 2:
        raise ValueError("odometry needs at least two scans")
    grid_cfg = grid_cfg or GridConfig()
    solver_cfg = solver_cfg or SolverConfig()
    pose = np.eye(4)
    frames = [OdometryFrame(
        frame=0, delta=StateVector(), sigmas=np.zeros(6), dnu_flags=np.zeros(6, dtype=bool),
        iterations=0, converged=True, status="origin", pose=pose.copy(),
    )]
    for k in range(1, len(scans)):
        try:
            rep = register(scans[k - 1], scans[k], grid_cfg, solver_cfg)
        except RegistrationError as exc:
            logger.warning("frame %d: registration failed (%s); using identity", k, exc)
            frames.append(OdometryFrame(
                frame=k, delta=StateVector(), sigmas=np.full(6, np.nan),
                dnu_flags=np.zeros(6, dtype=bool), iterations=0, converged=False,
                status="failed", pose=pose.copy(), message=str(exc),
            ))
            continue
        pose = pose @ state_to_matrix(rep.estimate)
        frames.append(OdometryFrame(
            frame=k, delta=rep.estimate, sigmas=predicted_sigmas(rep),
            dnu_flags=rep.dnu_flags.copy(), iterations=rep.iterations_used,
            converged=rep.converged, status="ok" if rep.converged else "nonconverged",
            pose=pose.copy(), voxels_used=rep.voxels_used,
            voxels_rejected_moving=rep.voxels_rejected_moving,
        ))
    return frames


def stitch_map(scans: Sequence[PointCloud], poses: Sequence[np.ndarray]) -> PointCloud:
    """All scans mapped into the frame of the first one."""
    if len(scans) != len(poses):
        raise ValueError("need one pose per scan")
    out = []
    for scan, m in zip(scans, poses):
        m = np.asarray(m, dtype=float)
        out.append(scan.with_points(scan.points @ m[:3, :3].T + m[:3, 3]))
    return PointCloud.concatenate(out)


# --- moving-object injection ------------------------------------------------

def voxel_center_direction(cfg: GridConfig, az_index: int, el_index: int) -> np.ndarray:
    """Unit vector through the angular center of a voxel column."""
    az = math.radians((az_index + 0.5) * cfg.azimuth_resolution)
    el = math.radians(cfg.elevation_span[0] + (el_index + 0.5) * cfg.elevation_resolution)
    return np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])


def inject_moving_cluster(
    reference: PointCloud,
    new: PointCloud,
    truth: StateVector,
    center: np.ndarray,
    displacement: np.ndarray,
    n_points: int = 200,
    sigma: float = 0.05,
    seed: int = 0,
) -> tuple[PointCloud, PointCloud]:
    """Add a compact Gaussian blob to both scans, shifted by ``displacement``
    (reference-frame meters) between them.

    ``center`` is in the reference frame; the new-scan copy is expressed in
    the new sensor frame using ``truth``.
    """
    gen = np.random.default_rng(seed)
    center = np.asarray(center, dtype=float)
    blob_ref = center + gen.normal(0.0, sigma, size=(n_points, 3))
    blob_world = center + np.asarray(displacement, dtype=float) + gen.normal(0.0, sigma, size=(n_points, 3))
    m = state_to_matrix(truth)
    # world = R p - t  =>  p = R^T (world + t)
    blob_new = (blob_world - m[:3, 3]) @ m[:3, :3]
    ref = PointCloud(np.vstack([reference.points, blob_ref]))
    out = PointCloud(np.vstack([new.points, blob_new]))
    return ref, out
