"""Experiment configuration: INI sections, strict key validation, overrides.

Unknown sections or keys are hard errors (no silent typos). Values missing
from the file fall back to defaults, some of which depend on the PDE family
(solver step sizes and scheme). All relative paths are resolved against the
config file's directory. `ROLLOUT_SEED` overrides every section seed and
`ROLLOUT_THREADS` bounds per-trajectory fan-out.
"""

import configparser
import io
import os
from dataclasses import dataclass, field, fields

from .errors import ConfigError

FAMILY_SOLVER_DEFAULTS = {
    "gray_scott": {"dt_internal": 0.5, "save_every": 20, "scheme": "imex_spectral"},
    "cahn_hilliard": {"dt_internal": 1e-4, "save_every": 50, "scheme": "imex_spectral"},
    "anisotropic_diffusion": {"dt_internal": 1e-3, "save_every": 10, "scheme": "exact_spectral"},
}


@dataclass
class DatasetSection:
    family: str = "gray_scott"
    nx: int = 32
    ny: int = 32
    lx: float = 1.0
    ly: float = 1.0
    train_trajectories: int = 200
    test_trajectories: int = 40
    horizon: int = 60
    context: int = 4
    future: int = 6
    stride: int = 1
    seed: int = 0
    out_dir: str = "data"


@dataclass
class SolverSection:
    dt_internal: float = -1.0     # -1 = family default
    save_every: int = -1
    scheme: str = "family_default"
    gs_delta_x: float = 2e-4
    gs_delta_y: float = 1e-4
    gs_feed_min: float = 0.02
    gs_feed_max: float = 0.06
    gs_kill_min: float = 0.05
    gs_kill_max: float = 0.065
    ch_mobility: float = 1.0
    ch_kappa: float = 5e-4
    ch_barrier: float = 1.0
    aniso_a_min: float = 0.1
    aniso_a_max: float = 1.0


@dataclass
class NetSection:
    hidden_channels: int = 64
    depth: int = 6
    kernel: int = 3
    embed_dim: int = 16
    dtype: str = "float32"


@dataclass
class TrainSection:
    objective: str = "diffusion"
    batch_size: int = 16
    epochs: int = 30
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    segments_per_epoch: int = 0
    resume: bool = False
    out_dir: str = "runs/train"


@dataclass
class SamplerSection:
    train_levels: int = 1000
    steps: int = 10
    eta: float = 0.0
    k_samples: int = 2
    clip_x0: float = 10.0


@dataclass
class PlannerSection:
    mode: str = "adaptive"
    tau: float = 1.0
    fixed_s: int = 1
    fuse: str = "mean"
    prefix: bool = False


@dataclass
class EvalSection:
    modes: str = "adaptive"
    max_trajectories: int = 0
    corr_enabled: bool = True
    corr_stride: int = 0          # 0 = future length
    seed: int = 0
    deterministic: bool = False   # zero wall-time columns in the report CSV
    out_dir: str = "runs/eval"

    def mode_list(self):
        return [m.strip() for m in self.modes.split(",") if m.strip()]


SECTIONS = {
    "dataset": DatasetSection,
    "solver": SolverSection,
    "net": NetSection,
    "train": TrainSection,
    "sampler": SamplerSection,
    "planner": PlannerSection,
    "eval": EvalSection,
}

_PATH_KEYS = {("dataset", "out_dir"), ("train", "out_dir"), ("eval", "out_dir")}


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    solver: SolverSection = field(default_factory=SolverSection)
    net: NetSection = field(default_factory=NetSection)
    train: TrainSection = field(default_factory=TrainSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    planner: PlannerSection = field(default_factory=PlannerSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def resolve(self, base_dir="."):
        """Fill family-dependent solver defaults and absolutize paths."""
        fam = self.dataset.family
        if fam not in FAMILY_SOLVER_DEFAULTS:
            raise ConfigError(f"unknown dataset.family {fam!r}")
        dfl = FAMILY_SOLVER_DEFAULTS[fam]
        if self.solver.dt_internal <= 0:
            self.solver.dt_internal = dfl["dt_internal"]
        if self.solver.save_every <= 0:
            self.solver.save_every = dfl["save_every"]
        if self.solver.scheme == "family_default":
            self.solver.scheme = dfl["scheme"]
        if self.eval.corr_stride <= 0:
            self.eval.corr_stride = self.dataset.future
        for sec, key in _PATH_KEYS:
            s = getattr(self, sec)
            setattr(s, key, os.path.normpath(os.path.join(base_dir, getattr(s, key))))
        seed_env = os.environ.get("ROLLOUT_SEED")
        if seed_env is not None:
            try:
                seed = int(seed_env)
            except ValueError:
                raise ConfigError(f"ROLLOUT_SEED must be an integer, got {seed_env!r}")
            self.dataset.seed = self.train.seed = self.eval.seed = seed
        return self


def _convert(section, key, raw, target_type):
    raw = raw.strip()
    try:
        if target_type is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        return target_type(raw)
    except ValueError:
        raise ConfigError(
            f"[{section}] {key} = {raw!r}: expected {target_type.__name__}") from None


def _apply(cfg: ExperimentConfig, section: str, key: str, raw: str):
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section [{section}]")
    sec = getattr(cfg, section)
    tfields = {f.name: f.type for f in fields(sec)}
    if key not in tfields:
        raise ConfigError(f"unknown config key [{section}] {key}")
    ftype = tfields[key]
    if isinstance(ftype, str):
        ftype = {"int": int, "float": float, "str": str, "bool": bool}[ftype]
    setattr(sec, key, _convert(section, key, raw, ftype))


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",),
                                       interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    if parser.defaults():
        raise ConfigError("top-level keys are not allowed; use a [section]")
    cfg = ExperimentConfig()
    for section in parser.sections():
        for key, raw in parser.items(section):
            _apply(cfg, section, key, raw)
    return cfg


def load_config(path, overrides=()) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as f:
            cfg = parse_config(f.read())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    for ov in overrides:
        apply_override(cfg, ov)
    return cfg.resolve(base_dir=os.path.dirname(os.path.abspath(path)))


def apply_override(cfg: ExperimentConfig, override: str):
    """Apply a --section.key=value command-line override."""
    if "=" not in override:
        raise ConfigError(f"override {override!r} is not of the form section.key=value")
    dotted, value = override.split("=", 1)
    if "." not in dotted:
        raise ConfigError(f"override {override!r} is not of the form section.key=value")
    section, key = dotted.split(".", 1)
    _apply(cfg, section.strip(), key.strip(), value)


def serialize_config(cfg: ExperimentConfig) -> str:
    out = io.StringIO()
    for name in SECTIONS:
        sec = getattr(cfg, name)
        out.write(f"[{name}]\n")
        for f in fields(sec):
            out.write(f"{f.name} = {getattr(sec, f.name)}\n")
        out.write("\n")
    return out.getvalue()
