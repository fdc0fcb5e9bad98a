"""Pseudo-spectral reference solvers on periodic grids.

Three families: Gray-Scott reaction-diffusion (2 channels, IMEX or RK4),
Cahn-Hilliard phase separation (1 channel, IMEX with implicit fourth-order
term), and constant-tensor anisotropic diffusion (1 channel, exact
per-mode integration). Nonlinear terms are dealiased with the 2/3 rule.

All state is float64 internally; a trajectory is aborted as diverged the
moment a saved frame stops being finite.
"""

from dataclasses import dataclass
from functools import lru_cache
from typing import Union

import numpy as np

from .data import Trajectory
from .errors import DivergedSimulation


@dataclass(frozen=True)
class Grid:
    nx: int
    ny: int
    lx: float = 1.0
    ly: float = 1.0
    periodic: bool = True

    def __post_init__(self):
        for n, name in ((self.nx, "nx"), (self.ny, "ny")):
            if n < 4 or (n & (n - 1)) != 0:
                raise ValueError(f"{name}={n} must be a power of two >= 4")
        if self.lx <= 0 or self.ly <= 0:
            raise ValueError("physical extents must be positive")
        if not self.periodic:
            raise ValueError("only periodic grids are supported")

    @property
    def dx(self):
        return self.lx / self.nx

    @property
    def dy(self):
        return self.ly / self.ny


@dataclass(frozen=True)
class GrayScott:
    delta_x: float = 2e-4
    delta_y: float = 1e-4
    f: float = 0.04
    k: float = 0.06

    channels = 2
    channel_names = ("X", "Y")
    tag = "gray_scott"

    def __post_init__(self):
        if min(self.delta_x, self.delta_y, self.f, self.k) < 0:
            raise ValueError("Gray-Scott coefficients must be nonnegative")


@dataclass(frozen=True)
class CahnHilliard:
    mobility: float = 1.0
    kappa: float = 5e-4
    barrier: float = 1.0

    channels = 1
    channel_names = ("c",)
    tag = "cahn_hilliard"

    def __post_init__(self):
        if self.mobility <= 0 or self.kappa <= 0 or self.barrier <= 0:
            raise ValueError("Cahn-Hilliard coefficients must be positive")


@dataclass(frozen=True)
class AnisotropicDiffusion:
    a11: float = 0.5
    a22: float = 0.5
    a12: float = 0.0

    channels = 1
    channel_names = ("u",)
    tag = "anisotropic_diffusion"

    def __post_init__(self):
        if self.a11 <= 0 or self.a11 * self.a22 - self.a12 ** 2 <= 0:
            raise ValueError("diffusion tensor must be symmetric positive-definite")


PdeSpec = Union[GrayScott, CahnHilliard, AnisotropicDiffusion]

FAMILIES = {cls.tag: cls for cls in (GrayScott, CahnHilliard, AnisotropicDiffusion)}

# numerical boundedness guard for Gray-Scott concentrations
GS_BOUNDS = (-0.05, 1.25)


@dataclass
class FieldState:
    values: np.ndarray   # (ny, nx, c)
    time: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.values).all():
            raise DivergedSimulation("field state contains non-finite values")


@dataclass(frozen=True)
class SolverConfig:
    dt_internal: float
    save_every: int
    scheme: str = "imex_spectral"

    def __post_init__(self):
        if self.dt_internal <= 0:
            raise ValueError("dt_internal must be positive")
        if self.save_every < 1:
            raise ValueError("save_every must be a positive integer")
        if self.scheme not in ("imex_spectral", "exact_spectral", "rk4_explicit"):
            raise ValueError(f"unknown scheme {self.scheme!r}")

    @property
    def dt_frame(self):
        return self.dt_internal * self.save_every


def default_solver_config(spec: PdeSpec) -> SolverConfig:
    """Desk-scale defaults: frame spacing tuned so patterns evolve over ~60 frames."""
    if isinstance(spec, GrayScott):
        return SolverConfig(dt_internal=0.5, save_every=20, scheme="imex_spectral")
    if isinstance(spec, CahnHilliard):
        return SolverConfig(dt_internal=1e-4, save_every=50, scheme="imex_spectral")
    return SolverConfig(dt_internal=1e-3, save_every=10, scheme="exact_spectral")


@lru_cache(maxsize=32)
def _spectral(nx, ny, lx, ly):
    """Wavenumber grids on the rfft2 layout plus the 2/3-rule dealias mask."""
    kx = 2.0 * np.pi * np.fft.rfftfreq(nx, d=lx / nx)
    ky = 2.0 * np.pi * np.fft.fftfreq(ny, d=ly / ny)
    KX, KY = np.meshgrid(kx, ky)
    ix = np.arange(nx // 2 + 1)
    iy = np.abs(np.fft.fftfreq(ny) * ny)
    mask = (ix[None, :] <= nx // 3) & (iy[:, None] <= ny // 3)
    return KX, KY, KX ** 2 + KY ** 2, mask.astype(float)


def _rfft(v):
    return np.fft.rfft2(v, axes=(0, 1))


def _irfft(vh, shape):
    return np.fft.irfft2(vh, s=shape, axes=(0, 1))


def _gs_reaction(vals, f, k):
    X, Y = vals[..., 0], vals[..., 1]
    xyy = X * Y * Y
    return np.stack([-xyy + f * (1.0 - X), xyy - (f + k) * Y], axis=-1)


def _step_gray_scott(spec, grid, vals, dt, scheme):
    KX, KY, K2, mask = _spectral(grid.nx, grid.ny, grid.lx, grid.ly)
    diff = np.stack([spec.delta_x * K2, spec.delta_y * K2], axis=-1)
    if scheme == "imex_spectral":
        rh = _rfft(_gs_reaction(vals, spec.f, spec.k)) * mask[..., None]
        vh = (_rfft(vals) + dt * rh) / (1.0 + dt * diff)
        return _irfft(vh, vals.shape[:2])
    if scheme == "rk4_explicit":
        def rhs(v):
            lap = _irfft(-diff * _rfft(v), v.shape[:2])
            react = _irfft(_rfft(_gs_reaction(v, spec.f, spec.k)) * mask[..., None], v.shape[:2])
            return lap + react
        k1 = rhs(vals)
        k2 = rhs(vals + 0.5 * dt * k1)
        k3 = rhs(vals + 0.5 * dt * k2)
        k4 = rhs(vals + dt * k3)
        return vals + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    raise ValueError(f"scheme {scheme!r} not supported for Gray-Scott")


def _ch_fprime(c, w):
    # d/dc of w*c^2*(1-c)^2
    return 2.0 * w * c * (1.0 - c) * (1.0 - 2.0 * c)


def _step_cahn_hilliard(spec, grid, vals, dt, scheme):
    if scheme != "imex_spectral":
        raise ValueError(f"scheme {scheme!r} not supported for Cahn-Hilliard")
    _, _, K2, mask = _spectral(grid.nx, grid.ny, grid.lx, grid.ly)
    M, kap = spec.mobility, spec.kappa
    nh = _rfft(_ch_fprime(vals[..., 0], spec.barrier)) * mask
    ch = (_rfft(vals[..., 0]) - dt * M * K2 * nh) / (1.0 + dt * M * kap * K2 ** 2)
    return _irfft(ch, vals.shape[:2])[..., None]


def _aniso_quadform(spec, grid):
    KX, KY, _, _ = _spectral(grid.nx, grid.ny, grid.lx, grid.ly)
    return spec.a11 * KX ** 2 + 2.0 * spec.a12 * KX * KY + spec.a22 * KY ** 2


def _step_anisotropic(spec, grid, vals, dt, scheme):
    if scheme != "exact_spectral":
        raise ValueError(f"scheme {scheme!r} not supported for anisotropic diffusion")
    q = _aniso_quadform(spec, grid)
    return _irfft(np.exp(-q * dt) * _rfft(vals[..., 0]), vals.shape[:2])[..., None]


_STEPPERS = {
    GrayScott: _step_gray_scott,
    CahnHilliard: _step_cahn_hilliard,
    AnisotropicDiffusion: _step_anisotropic,
}


def step(spec: PdeSpec, state: FieldState, cfg: SolverConfig) -> FieldState:
    """Advance the state by one internal step dt_internal."""
    vals = np.asarray(state.values, dtype=np.float64)
    if vals.ndim != 3 or vals.shape[2] != spec.channels:
        raise ValueError(f"state shape {vals.shape} does not match {spec.channels} channels")
    ny, nx = vals.shape[:2]
    grid = Grid(nx=nx, ny=ny)
    out = _STEPPERS[type(spec)](spec, grid, vals, cfg.dt_internal, cfg.scheme)
    if not np.isfinite(out).all():
        raise DivergedSimulation(f"{spec.tag} step produced non-finite values")
    return FieldState(values=out, time=state.time + cfg.dt_internal)


def sample_initial_condition(spec: PdeSpec, grid: Grid, seed: int,
                             patches=(1, 4)) -> FieldState:
    """Deterministic synthetic initial condition for the family."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(101,)))
    ny, nx = grid.ny, grid.nx
    if isinstance(spec, GrayScott):
        vals = np.zeros((ny, nx, 2))
        vals[..., 0] = 1.0
        n_patch = int(rng.integers(patches[0], patches[1] + 1)) if patches[1] > 0 else 0
        size = max(2, nx // 4)   # patches below ~nx/4 fail to ignite at desk diffusivities
        for _ in range(n_patch):
            cy, cx = rng.integers(0, ny), rng.integers(0, nx)
            yy = (np.arange(cy, cy + size) % ny)[:, None]
            xx = (np.arange(cx, cx + size) % nx)[None, :]
            vals[yy, xx, 0] = 0.5
            vals[yy, xx, 1] = 0.25
        return FieldState(values=vals)
    if isinstance(spec, CahnHilliard):
        c = rng.uniform(0.4, 0.6, size=(ny, nx))
        # one periodic 3x3 box-blur pass
        sm = sum(np.roll(np.roll(c, dy, 0), dx, 1)
                 for dy in (-1, 0, 1) for dx in (-1, 0, 1)) / 9.0
        return FieldState(values=sm[..., None])
    # anisotropic diffusion: band-limited random Fourier field, unit std
    kmax = max(1, nx // 4)
    spec_h = np.zeros((ny, nx // 2 + 1), dtype=complex)
    ix = np.arange(nx // 2 + 1)
    iy = np.abs(np.fft.fftfreq(ny) * ny)
    band = (np.sqrt(ix[None, :] ** 2 + iy[:, None] ** 2) <= kmax)
    n_band = int(band.sum())
    spec_h[band] = rng.standard_normal(n_band) + 1j * rng.standard_normal(n_band)
    spec_h[0, 0] = 0.0
    u = _irfft(spec_h, (ny, nx))
    sd = u.std()
    if sd < 1e-12:
        raise ValueError("degenerate random field draw")
    return FieldState(values=(u / sd)[..., None])


def simulate_trajectory(spec: PdeSpec, grid: Grid, cfg: SolverConfig,
                        horizon: int, seed: int,
                        initial: FieldState = None) -> Trajectory:
    """Run horizon*save_every internal steps, saving horizon+1 frames.

    Frame i is the state after i*save_every internal steps; frame 0 is the
    initial condition. Raises DivergedSimulation with the failing frame
    index if the state stops being finite or (Gray-Scott) leaves the
    boundedness guard.
    """
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    state = initial if initial is not None else sample_initial_condition(spec, grid, seed)
    vals = np.asarray(state.values, dtype=np.float64)
    frames = np.empty((horizon + 1,) + vals.shape)
    frames[0] = vals
    stepper = _STEPPERS[type(spec)]
    for i in range(1, horizon + 1):
        for _ in range(cfg.save_every):
            vals = stepper(spec, grid, vals, cfg.dt_internal, cfg.scheme)
        if not np.isfinite(vals).all():
            raise DivergedSimulation(f"{spec.tag} diverged at frame {i}", frame=i)
        if isinstance(spec, GrayScott) and (vals.min() < GS_BOUNDS[0] or vals.max() > GS_BOUNDS[1]):
            raise DivergedSimulation(
                f"{spec.tag} left bounds {GS_BOUNDS} at frame {i}", frame=i)
        frames[i] = vals
    return Trajectory(frames=frames, dt=cfg.dt_frame, spec_tag=spec.tag,
                      seed=seed, channel_names=list(spec.channel_names))


def analytic_anisotropic(spec: AnisotropicDiffusion, grid: Grid,
                         initial_values: np.ndarray, times) -> np.ndarray:
    """Closed-form spectral solution u(t) for constant-tensor diffusion."""
    q = _aniso_quadform(spec, grid)
    u0h = _rfft(initial_values[..., 0])
    out = np.empty((len(times), grid.ny, grid.nx, 1))
    for i, t in enumerate(times):
        out[i, ..., 0] = _irfft(np.exp(-q * t) * u0h, (grid.ny, grid.nx))
    return out
