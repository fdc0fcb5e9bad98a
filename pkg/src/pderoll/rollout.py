"""Autoregressive long-horizon prediction, evaluation metrics, and the
uncertainty-vs-error analysis.

The rollout loop lives in normalized space: each iteration draws K futures
from the sampler, picks a step size via the configured planner, accepts the
first s frames of the fused prediction, and slides the C-frame context.
Metrics (relative L2, per-timestep Pearson, stability horizon) are computed
in denormalized physical space against ground truth.
"""

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .data import chunk_trajectory, denormalize, normalize
from .diffusion import ddim_sample
from .errors import NumericFailure, PderollError
from .planner import (PlannerConfig, derivative_uncertainty, estimate_uncertainty,
                      fuse_samples, select_step)


class DegenerateCorrelation(PderollError):
    """Pearson correlation undefined (constant inputs or too few pairs)."""


@dataclass
class RolloutResult:
    """Raw rollout output in normalized space, before scoring."""
    prediction: np.ndarray          # (n_pred, ny, nx, c); may be short if diverged
    step_log: list                  # (timestep, chosen s, eps_hat profile or None)
    nfe: int
    forward_seconds: float
    select_seconds: float
    diverged: bool = False

    @property
    def chosen_steps(self):
        return np.array([s for _, s, _ in self.step_log], dtype=int)


@dataclass
class RolloutReport:
    prediction: np.ndarray          # denormalized, aligned to truth frames C..T
    rel_l2: float
    r_curve: np.ndarray
    t_above: float
    step_histogram: np.ndarray      # counts per s in 1..F
    avg_step: float
    nfe: int
    forward_seconds: float
    select_seconds: float
    diverged: bool = False
    step_log: list = field(default_factory=list)


def autoregressive_rollout(sample_fn, planner_cfg: PlannerConfig, context,
                           horizon: int, rng, future_frames: int) -> RolloutResult:
    """Predict horizon - C frames starting from a C-frame normalized context.

    sample_fn(context, rng) supplies (K, F, ny, nx, c) candidate futures plus
    its network-evaluation count; the DDIM sampler, the direct regression
    predictor, and test oracles all plug in here. `horizon` counts total
    aligned frames (context + predicted). Overshoot on the final iteration
    is truncated rather than re-requested, so the sampler always sees its
    native segment shape. A numeric failure mid-rollout flags the result
    diverged and keeps the partial timeline.
    """
    ctx = np.asarray(context)
    C = ctx.shape[0]
    n_pred = horizon - C
    if n_pred < 1:
        raise ValueError("horizon must exceed the context length")
    F = future_frames
    accepted = []
    step_log = []
    nfe = 0
    fwd_s = 0.0
    sel_s = 0.0
    produced = 0
    diverged = False
    while produced < n_pred:
        t0 = time.perf_counter()
        try:
            samples, evals = sample_fn(ctx, rng)
        except NumericFailure:
            diverged = True
            fwd_s += time.perf_counter() - t0
            break
        fwd_s += time.perf_counter() - t0
        nfe += evals
        prediction = fuse_samples(samples, planner_cfg.fuse)
        if prediction.shape[0] != F:
            raise ValueError(f"sampler produced {prediction.shape[0]} frames, expected {F}")
        t1 = time.perf_counter()
        if planner_cfg.mode == "adaptive":
            profile = estimate_uncertainty(samples)
            s = select_step(profile, planner_cfg.tau, planner_cfg.prefix)
        elif planner_cfg.mode == "derivative":
            profile = derivative_uncertainty(prediction, ctx[-1])
            s = select_step(profile, planner_cfg.tau, planner_cfg.prefix)
        else:
            profile = None
            s = min(planner_cfg.fixed_s, F)
        sel_s += time.perf_counter() - t1
        step_log.append((C + produced, s, None if profile is None else profile.eps_hat))
        take = min(s, n_pred - produced)
        accepted.append(prediction[:take])
        produced += take
        ctx = np.concatenate([ctx, prediction[:take]], axis=0)[-C:]
    pred = (np.concatenate(accepted, axis=0) if accepted
            else np.empty((0,) + ctx.shape[1:], dtype=ctx.dtype))
    return RolloutResult(prediction=pred, step_log=step_log, nfe=nfe,
                         forward_seconds=fwd_s, select_seconds=sel_s,
                         diverged=diverged)


def rel_l2(prediction, truth) -> float:
    """Relative L2 error over the whole trajectory tensor."""
    p = np.asarray(prediction, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    denom = np.linalg.norm(t.ravel())
    if denom == 0.0:
        raise ValueError("zero-norm ground truth")
    return float(np.linalg.norm((p - t).ravel()) / denom)


def pearson_curve(prediction, truth) -> np.ndarray:
    """Per-timestep Pearson correlation of flattened frames.

    Frames where either side is constant get NaN, which downstream
    treats as falling below any positive correlation threshold.
    """
    p = np.asarray(prediction, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    n = p.shape[0]
    out = np.empty(n)
    for i in range(n):
        a = p[i].ravel()
        b = t[i].ravel()
        a = a - a.mean()
        b = b - b.mean()
        denom = np.sqrt((a * a).sum() * (b * b).sum())
        out[i] = np.nan if denom == 0.0 else float((a * b).sum() / denom)
    return out


def t_above_threshold(r_curve, threshold: float = 0.9, horizon: int = None) -> float:
    """Normalized latest timestep with correlation still above threshold.

    NaN entries (undefined or missing frames) count as below threshold;
    an empty qualifying set gives 0.
    """
    r = np.asarray(r_curve, dtype=np.float64)
    T = horizon if horizon is not None else r.size
    with np.errstate(invalid="ignore"):
        good = np.flatnonzero(np.nan_to_num(r, nan=-np.inf) >= threshold)
    return float(good[-1] + 1) / T if good.size else 0.0


def score_rollout(result: RolloutResult, truth_frames, stats, planner_cfg,
                  future_frames: int) -> RolloutReport:
    """Denormalize the prediction and compute every report metric vs truth.

    truth_frames are the ground-truth frames the prediction aligns to
    (physical units, frames C..T of the trajectory). Diverged rollouts are
    scored over their finite prefix with missing frames uncorrelated.
    """
    n_target = truth_frames.shape[0]
    pred_n = np.asarray(result.prediction)
    pred = denormalize(pred_n.astype(np.float64), stats)
    n_have = pred.shape[0]
    r = np.full(n_target, np.nan)
    if n_have:
        r[:n_have] = pearson_curve(pred, truth_frames[:n_have])
        rl2 = rel_l2(pred, truth_frames[:n_have])
    else:
        rl2 = float("inf")
    steps = result.chosen_steps
    F = future_frames
    hist = np.bincount(steps, minlength=F + 1)[1:F + 1] if steps.size else np.zeros(F, int)
    return RolloutReport(
        prediction=pred,
        rel_l2=rl2,
        r_curve=r,
        t_above=t_above_threshold(r, 0.9, n_target),
        step_histogram=hist,
        avg_step=float(steps.mean()) if steps.size else 0.0,
        nfe=result.nfe,
        forward_seconds=result.forward_seconds,
        select_seconds=result.select_seconds,
        diverged=result.diverged,
        step_log=result.step_log,
    )


def uncertainty_error_correlation(model, schedule, sampler_cfg, trajectories,
                                  stats, C: int, F: int, rng, stride: int = None,
                                  fuse: str = "mean"):
    """Pairs (eps_hat_t, per-frame relative L2) over test segments.

    Ground-truth contexts only (no rollout feedback): for every segment the
    sampler draws K futures; each future offset contributes one scatter
    point. Returns (pearson rho, rows, (slope, intercept)) where rows are
    (eps_hat, rel_err, frame_offset).
    """
    if stride is None:
        stride = F
    rows = []
    for traj in trajectories:
        frames = np.asarray(traj.frames, dtype=np.float64)
        norm = normalize(frames, stats).astype(np.float32)
        for seg in chunk_trajectory(frames.shape[0], C, F, stride):
            t0 = seg.t_start
            samples = ddim_sample(model, schedule, norm[t0:t0 + C], sampler_cfg, F, rng)
            profile = estimate_uncertainty(samples)
            pred = denormalize(fuse_samples(samples, fuse).astype(np.float64), stats)
            truth = frames[t0 + C:t0 + C + F]
            for t in range(F):
                denom = np.linalg.norm(truth[t].ravel())
                if denom == 0.0:
                    continue
                err = np.linalg.norm((pred[t] - truth[t]).ravel()) / denom
                rows.append((float(profile.eps_hat[t]), float(err), t + 1))
    if len(rows) < 10:
        raise DegenerateCorrelation(f"only {len(rows)} pairs; need at least 10")
    eps = np.array([r[0] for r in rows])
    err = np.array([r[1] for r in rows])
    if eps.std() == 0.0 or err.std() == 0.0:
        raise DegenerateCorrelation("constant uncertainty or error; rho undefined")
    rho = float(np.corrcoef(eps, err)[0, 1])
    slope, intercept = np.polyfit(eps, err, 1)
    return rho, rows, (float(slope), float(intercept))


REPORT_HEADER = ["trajectory_id", "mode", "tau", "K", "S", "rel_l2", "t_above",
                 "avg_step", "nfe", "forward_s", "select_s"]

STEP_LOG_HEADER = ["trajectory_id", "mode", "iteration", "timestep", "s"]


def report_row(trajectory_id, mode_tag, tau, sampler_cfg, report: RolloutReport,
               zero_timings: bool = False):
    fwd = 0.0 if zero_timings else report.forward_seconds
    sel = 0.0 if zero_timings else report.select_seconds
    return [str(trajectory_id), mode_tag, f"{tau:.6g}", str(sampler_cfg.K),
            str(sampler_cfg.steps), f"{report.rel_l2:.10g}", f"{report.t_above:.10g}",
            f"{report.avg_step:.10g}", str(report.nfe), f"{fwd:.6f}", f"{sel:.6f}"]


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def step_log_rows(trajectory_id, mode_tag, report: RolloutReport, F: int):
    rows = []
    for it, (t, s, profile) in enumerate(report.step_log):
        base = [str(trajectory_id), mode_tag, str(it), str(t), str(s)]
        prof = [""] * F if profile is None else [f"{v:.10g}" for v in profile]
        rows.append(base + prof)
    return rows


def step_log_header(F: int):
    return STEP_LOG_HEADER + [f"eps_hat_{i + 1}" for i in range(F)]
