"""Forward noising, training objectives, Adam loop, and the DDIM sampler.

Training follows the per-frame-noise recipe: every future frame of a segment
gets an independent noise index while condition frames stay at level 0, and
the net regresses the injected noise (epsilon parameterization). Inference
runs a strided DDIM ladder with a level shared across the future frames;
eta = 0 makes each sample a deterministic function of its initial noise.
"""

from dataclasses import dataclass, field

import numpy as np

from . import net as net_mod
from .errors import NumericFailure


@dataclass
class NoiseSchedule:
    s_train: int
    alpha_bar: np.ndarray   # (s_train + 1,), alpha_bar[0] = 1, strictly decreasing

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.shape != (self.s_train + 1,):
            raise ValueError("alpha_bar must have s_train + 1 entries")
        if ab[0] != 1.0:
            raise ValueError("alpha_bar[0] must be exactly 1")
        if not np.all(np.diff(ab) < 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if ab[-1] >= 1e-3:
            raise ValueError("alpha_bar[s_train] must be below 1e-3")
        self.alpha_bar = ab


def cosine_schedule(s_train: int = 1000, alpha_bar_end: float = 1e-4) -> NoiseSchedule:
    """Cosine-shaped alpha-bar hitting alpha_bar_end exactly at s_train.

    The endpoint is kept well above zero so the epsilon -> x0 conversion
    stays conditioned in float32.
    """
    theta_max = np.arccos(np.sqrt(alpha_bar_end))
    s = np.arange(s_train + 1) / s_train
    ab = np.cos(s * theta_max) ** 2
    ab[0] = 1.0
    ab[-1] = alpha_bar_end
    return NoiseSchedule(s_train=s_train, alpha_bar=ab)


@dataclass
class SamplerConfig:
    steps: int = 10     # DDIM inference steps
    eta: float = 0.0    # 0 = deterministic
    K: int = 2          # samples per condition
    clip_x0: float = 10.0   # clamp on the per-step denoised estimate, in
                            # normalized-field units; 0 disables. The first
                            # step divides by sqrt(alpha_bar_end), so an
                            # unclamped estimate amplifies model error ~100x.

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must be in [0, 1]")
        if self.clip_x0 < 0.0:
            raise ValueError("clip_x0 must be nonnegative")


@dataclass
class TrainConfig:
    objective: str = "diffusion"    # or "regression"
    batch_size: int = 16
    epochs: int = 30
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    segments_per_epoch: int = 0     # 0 = use every segment each epoch
    deterministic: bool = True

    def __post_init__(self):
        # zero is allowed (a no-op optimizer), negative rates are not
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.objective not in ("diffusion", "regression"):
            raise ValueError(f"unknown objective {self.objective!r}")


def add_noise(schedule: NoiseSchedule, x0, levels, noise):
    """Frame-wise forward process x_s = sqrt(ab[s]) x0 + sqrt(1-ab[s]) eps.

    x0: (..., F, ny, nx, c); levels: (..., F) integer indices. Frames at
    level 0 are returned bitwise (no arithmetic touches them).
    """
    x0 = np.asarray(x0)
    levels = np.asarray(levels)
    if levels.min() < 0 or levels.max() > schedule.s_train:
        raise ValueError(f"noise level outside [0, {schedule.s_train}]")
    ab = schedule.alpha_bar[levels].astype(x0.dtype)[..., None, None, None]
    out = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * np.asarray(noise, dtype=x0.dtype)
    zero = levels == 0
    if zero.any():
        out[zero] = x0[zero]
    return out


def _cond_mask(T, C):
    m = np.zeros(T, dtype=bool)
    m[:C] = True
    return m


def diffusion_loss(model: net_mod.Denoiser, schedule: NoiseSchedule, segment,
                   C: int, rng) -> tuple:
    """Per-frame-noise objective: (scalar MSE over future frames, param grads).

    Draws one independent level per future frame (uniform in [1, s_train]),
    leaves condition frames clean at level 0, and scores only the F future
    frames of the epsilon prediction.
    """
    seg = np.asarray(segment)
    batched = seg.ndim == 5
    if not batched:
        seg = seg[None]
    B, T = seg.shape[:2]
    F = T - C
    levels = np.zeros((B, T), dtype=np.int64)
    levels[:, C:] = rng.integers(1, schedule.s_train + 1, size=(B, F))
    eps = rng.standard_normal(seg[:, C:].shape).astype(seg.dtype)
    noisy = seg.copy()
    noisy[:, C:] = add_noise(schedule, seg[:, C:], levels[:, C:], eps)
    mask = _cond_mask(T, C)

    n = eps.size

    def cot_fn(out):
        diff = out[:, C:] - eps
        loss = float(np.mean(diff.astype(np.float64) ** 2))
        cot = np.zeros_like(out)
        cot[:, C:] = (2.0 / n) * diff
        return loss, cot

    return model.value_and_grad(noisy, levels, mask, cot_fn)


def regression_loss(model: net_mod.Denoiser, segment, C: int) -> tuple:
    """Direct-prediction ablation: net output at all-zero noise levels is read
    as u_F; returns (mean squared error over future frames, param grads)."""
    seg = np.asarray(segment)
    batched = seg.ndim == 5
    if not batched:
        seg = seg[None]
    B, T = seg.shape[:2]
    target = seg[:, C:]
    blanked = seg.copy()
    blanked[:, C:] = 0.0
    levels = np.zeros((B, T), dtype=np.int64)
    mask = _cond_mask(T, C)
    n = target.size

    def cot_fn(out):
        diff = out[:, C:] - target
        loss = float(np.mean(diff.astype(np.float64) ** 2))
        cot = np.zeros_like(out)
        cot[:, C:] = (2.0 / n) * diff
        return loss, cot

    return model.value_and_grad(blanked, levels, mask, cot_fn)


@dataclass
class TrainState:
    """Adam moments and progress; persisted alongside checkpoints for resume."""
    m: np.ndarray
    v: np.ndarray
    adam_t: int = 0
    epoch: int = 0
    loss_curve: list = field(default_factory=list)

    @classmethod
    def fresh(cls, n_params, dtype):
        return cls(m=np.zeros(n_params, dtype=dtype), v=np.zeros(n_params, dtype=dtype))

    def save(self, path):
        np.savez(path, m=self.m, v=self.v, adam_t=self.adam_t, epoch=self.epoch,
                 loss_curve=np.asarray(self.loss_curve, dtype=np.float64))

    @classmethod
    def load(cls, path):
        z = np.load(path)
        return cls(m=z["m"], v=z["v"], adam_t=int(z["adam_t"]), epoch=int(z["epoch"]),
                   loss_curve=list(z["loss_curve"]))


def adam_step(params, grad, state: TrainState, cfg: TrainConfig):
    state.adam_t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    state.m += (1 - b1) * (grad - state.m)
    state.v += (1 - b2) * (grad * grad - state.v)
    if cfg.learning_rate == 0.0:
        return
    mhat = state.m / (1 - b1 ** state.adam_t)
    vhat = state.v / (1 - b2 ** state.adam_t)
    params.vector -= (cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.adam_eps)).astype(
        params.vector.dtype)


def train(params: net_mod.DenoiserParams, store, cfg: TrainConfig,
          schedule: NoiseSchedule, C: int, state: TrainState = None,
          epoch_callback=None):
    """Adam over shuffled segments; updates params in place.

    Returns the TrainState whose loss_curve holds per-epoch mean losses.
    Deterministic given cfg.seed: all randomness is drawn from per-epoch
    generators and batches reduce in a fixed order. On numeric failure the
    last completed epoch's params are restored before re-raising.
    """
    if len(store) == 0:
        raise ValueError("training store is empty")
    if state is None:
        state = TrainState.fresh(params.vector.size, params.vector.dtype)
    model = net_mod.Denoiser(params)
    last_good = params.vector.copy()
    for epoch in range(state.epoch, cfg.epochs):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed,
                                                           spawn_key=(7, epoch)))
        order = rng.permutation(len(store))
        if cfg.segments_per_epoch and cfg.segments_per_epoch < len(order):
            order = order[:cfg.segments_per_epoch]
        losses = []
        try:
            for lo in range(0, len(order), cfg.batch_size):
                batch = store.batch(order[lo:lo + cfg.batch_size])
                if cfg.objective == "diffusion":
                    loss, grad = diffusion_loss(model, schedule, batch, C, rng)
                else:
                    loss, grad = regression_loss(model, batch, C)
                if not np.isfinite(loss):
                    raise NumericFailure(f"non-finite loss at epoch {epoch}")
                adam_step(params, grad, state, cfg)
                losses.append(loss)
        except NumericFailure:
            params.vector[:] = last_good
            raise
        state.epoch = epoch + 1
        state.loss_curve.append(float(np.mean(losses)))
        last_good = params.vector.copy()
        if epoch_callback is not None:
            epoch_callback(epoch, state)
    return state


def ddim_level_ladder(schedule: NoiseSchedule, steps: int):
    """Uniformly spaced level indices from s_train down to 0 (inclusive)."""
    if steps > schedule.s_train:
        raise ValueError(f"steps {steps} exceeds s_train {schedule.s_train}")
    return np.round(np.linspace(schedule.s_train, 0, steps + 1)).astype(int)


def ddim_sample(model, schedule: NoiseSchedule, condition, sampler: SamplerConfig,
                future_frames: int, rng) -> np.ndarray:
    """Draw K conditional futures, one batched forward per DDIM step.

    condition: (C, ny, nx, c) normalized context. Returns (K, F, ny, nx, c).
    With eta = 0 the output is a deterministic function of (params,
    condition, initial noise), so a fixed rng seed reproduces samples
    bitwise. Costs exactly `sampler.steps` batched network evaluations.
    """
    cond = np.asarray(condition)
    C = cond.shape[0]
    F = future_frames
    T = C + F
    K = sampler.K
    ladder = ddim_level_ladder(schedule, sampler.steps)
    ab = schedule.alpha_bar
    x = rng.standard_normal((K, F) + cond.shape[1:]).astype(cond.dtype)
    seg = np.empty((K, T) + cond.shape[1:], dtype=cond.dtype)
    seg[:, :C] = cond
    mask = _cond_mask(T, C)
    levels = np.zeros((K, T), dtype=np.int64)
    for i in range(sampler.steps):
        s_cur, s_next = int(ladder[i]), int(ladder[i + 1])
        seg[:, C:] = x
        levels[:, C:] = s_cur
        eps = model.predict_noise(seg, levels, mask)[:, C:]
        a_cur, a_next = ab[s_cur], ab[s_next]
        x0 = (x - np.sqrt(1.0 - a_cur) * eps) / np.sqrt(a_cur)
        if sampler.clip_x0 > 0.0:
            np.clip(x0, -sampler.clip_x0, sampler.clip_x0, out=x0)
        if sampler.eta > 0.0 and s_next > 0:
            sigma = sampler.eta * np.sqrt((1 - a_next) / (1 - a_cur)) \
                * np.sqrt(1 - a_cur / a_next)
            dir_coef = np.sqrt(max(1.0 - a_next - sigma ** 2, 0.0))
            noise = rng.standard_normal(x.shape).astype(x.dtype)
            x = (np.sqrt(a_next) * x0 + dir_coef * eps + sigma * noise).astype(x.dtype)
        else:
            x = (np.sqrt(a_next) * x0 + np.sqrt(1.0 - a_next) * eps).astype(x.dtype)
        if not np.isfinite(x).all():
            raise NumericFailure(f"non-finite sampler state at DDIM step {i}")
    return x


def make_ddim_sampler(model, schedule: NoiseSchedule, sampler: SamplerConfig,
                      future_frames: int):
    """Rollout-facing closure drawing K futures; costs `steps` evaluations."""
    def sample_fn(context, rng):
        return ddim_sample(model, schedule, context, sampler, future_frames, rng), \
            sampler.steps
    return sample_fn


def make_direct_predictor(model, future_frames: int):
    """Regression-variant sampler: one clean forward, read as the prediction.

    Future slots enter zeroed at level 0 and the output's future slots are
    the prediction; returned as a single 'sample' costing one evaluation.
    """
    def sample_fn(context, rng):
        cond = np.asarray(context)
        C = cond.shape[0]
        T = C + future_frames
        seg = np.zeros((1, T) + cond.shape[1:], dtype=cond.dtype)
        seg[0, :C] = cond
        out = model.predict_noise(seg, np.zeros((1, T), dtype=np.int64),
                                  _cond_mask(T, C))
        return out[:, C:].astype(cond.dtype), 1
    return sample_fn
