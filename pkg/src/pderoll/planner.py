"""Sample-spread uncertainty, adaptive step selection, and baselines.

The uncertainty of future frame t is the Euclidean norm (over all grid
points and channels) of the element-wise population standard deviation of
the K conditional samples. The selected rollout step is the largest frame
index whose uncertainty clears the threshold (literal max semantics, with
an optional prefix variant), falling back to 1 when none does.
"""

from dataclasses import dataclass

import numpy as np


@dataclass
class UncertaintyProfile:
    eps_hat: np.ndarray   # (F,) nonnegative, normalized-space units

    def __post_init__(self):
        self.eps_hat = np.asarray(self.eps_hat, dtype=np.float64)
        if not np.isfinite(self.eps_hat).all() or (self.eps_hat < 0).any():
            raise ValueError("eps_hat entries must be finite and nonnegative")


@dataclass
class PlannerConfig:
    mode: str = "adaptive"          # adaptive | fixed | derivative
    tau: float = 1.0
    fixed_s: int = 1
    fuse: str = "mean"              # mean | first
    prefix: bool = False            # prefix variant of the step rule

    def __post_init__(self):
        if self.mode not in ("adaptive", "fixed", "derivative"):
            raise ValueError(f"unknown planner mode {self.mode!r}")
        if self.mode in ("adaptive", "derivative") and self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.mode == "fixed" and self.fixed_s < 1:
            raise ValueError("fixed step size must be >= 1")
        if self.fuse not in ("mean", "first"):
            raise ValueError(f"unknown fuse mode {self.fuse!r}")


def estimate_uncertainty(samples) -> UncertaintyProfile:
    """Per-frame spread of K sampled futures (K, F, ny, nx, c).

    Population standard deviation (divide by K) element-wise over the K
    samples, then the Euclidean norm over the N*c elements of each frame.
    """
    s = np.asarray(samples, dtype=np.float64)
    if s.ndim != 5 or s.shape[0] < 2:
        raise ValueError("need K >= 2 samples of shape (K, F, ny, nx, c)")
    # pivot on sample 0: shift-invariant, and identical samples give exact 0
    d = s - s[0:1]
    std = d.std(axis=0, ddof=0)
    return UncertaintyProfile(np.sqrt((std ** 2).sum(axis=(1, 2, 3))))


def derivative_uncertainty(prediction, last_context_frame) -> UncertaintyProfile:
    """Finite-difference surrogate: squared norm of u_t - u_{t-1} per frame."""
    pred = np.asarray(prediction, dtype=np.float64)
    prev = np.concatenate([np.asarray(last_context_frame, dtype=np.float64)[None],
                           pred[:-1]], axis=0)
    diff = pred - prev
    return UncertaintyProfile((diff ** 2).sum(axis=(1, 2, 3)))


def select_step(profile: UncertaintyProfile, tau: float, prefix: bool = False) -> int:
    """Largest 1-based frame index below threshold; 1 when none qualifies.

    With prefix=True the step instead stops at the first violation, i.e.
    only a leading run of confident frames is accepted.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    ok = profile.eps_hat < tau
    if prefix:
        bad = np.flatnonzero(~ok)
        return int(bad[0]) if bad.size and bad[0] > 0 else (1 if bad.size else ok.size)
    idx = np.flatnonzero(ok)
    return int(idx[-1]) + 1 if idx.size else 1


def fuse_samples(samples, fuse: str = "mean") -> np.ndarray:
    """Collapse the K samples to the accepted prediction."""
    s = np.asarray(samples)
    if s.shape[0] < 1:
        raise ValueError("need K >= 1 samples")
    if fuse == "mean":
        return s.mean(axis=0, dtype=np.float64).astype(s.dtype)
    if fuse == "first":
        return s[0].copy()
    raise ValueError(f"unknown fuse mode {fuse!r}")
