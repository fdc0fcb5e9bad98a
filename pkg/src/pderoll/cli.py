"""Command-line entry point: generate, train, eval, sweep, report.

Every verb takes `-c CONFIG` plus any number of `--section.key=value`
overrides. Exit codes: 0 success, 2 config error, 3 data error, 4 numeric
failure. Honored environment: ROLLOUT_THREADS (per-trajectory fan-out) and
ROLLOUT_SEED (overrides every section seed).
"""

import argparse
import csv
import os
import sys
import warnings
import zlib
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import data, diffusion, net, plotting, rollout, sim
from .config import ExperimentConfig, load_config
from .errors import (ConfigError, DataError, DivergedSimulation, NumericFailure)
from .planner import PlannerConfig
from .rollout import DegenerateCorrelation


def _threads():
    raw = os.environ.get("ROLLOUT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"ROLLOUT_THREADS must be an integer, got {raw!r}")
    return max(1, n)


def _fanout(fn, items):
    n = _threads()
    if n == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _log(msg):
    print(msg, flush=True)


# ---------------------------------------------------------------- generate

def sample_spec(cfg: ExperimentConfig, seed: int) -> sim.PdeSpec:
    """Per-trajectory PDE parameters, deterministic in the trajectory seed."""
    fam = cfg.dataset.family
    s = cfg.solver
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(11,)))
    if fam == "gray_scott":
        return sim.GrayScott(delta_x=s.gs_delta_x, delta_y=s.gs_delta_y,
                             f=float(rng.uniform(s.gs_feed_min, s.gs_feed_max)),
                             k=float(rng.uniform(s.gs_kill_min, s.gs_kill_max)))
    if fam == "cahn_hilliard":
        return sim.CahnHilliard(mobility=s.ch_mobility, kappa=s.ch_kappa,
                                barrier=s.ch_barrier)
    a, b = rng.uniform(s.aniso_a_min, s.aniso_a_max, size=2)
    th = rng.uniform(0.0, np.pi)
    ct, st = np.cos(th), np.sin(th)
    return sim.AnisotropicDiffusion(a11=float(a * ct * ct + b * st * st),
                                    a22=float(a * st * st + b * ct * ct),
                                    a12=float((a - b) * st * ct))


def _solver_config(cfg: ExperimentConfig) -> sim.SolverConfig:
    return sim.SolverConfig(dt_internal=cfg.solver.dt_internal,
                            save_every=cfg.solver.save_every,
                            scheme=cfg.solver.scheme)


def _traj_filename(family, split, seed):
    return f"{family}_{split}_{seed:06d}.pdet"


def cmd_generate(cfg: ExperimentConfig) -> int:
    ds = cfg.dataset
    grid = sim.Grid(nx=ds.nx, ny=ds.ny, lx=ds.lx, ly=ds.ly)
    scfg = _solver_config(cfg)
    os.makedirs(ds.out_dir, exist_ok=True)
    jobs = [(ds.seed + i, "train") for i in range(ds.train_trajectories)] + \
           [(ds.seed + 10000 + i, "test") for i in range(ds.test_trajectories)]

    def run_one(job):
        seed, split = job
        spec = sample_spec(cfg, seed)
        try:
            traj = sim.simulate_trajectory(spec, grid, scfg, ds.horizon, seed)
        except DivergedSimulation as e:
            return (seed, split, None, str(e))
        name = _traj_filename(ds.family, split, seed)
        data.save_trajectory(traj, os.path.join(ds.out_dir, name))
        return (seed, split, name, None)

    results = _fanout(run_one, jobs)
    entries = []
    train_frames = []
    for seed, split, name, err in results:
        if err is not None:
            _log(f"warning: seed {seed} ({split}) excluded: {err}")
            continue
        entries.append(data.ManifestEntry(path=name, spec_tag=ds.family,
                                          seed=seed, split=split))
        if split == "train":
            train_frames.append(os.path.join(ds.out_dir, name))
    if not train_frames:
        raise DataError("no train trajectory survived generation")
    stats = data.fit_normalization(data.load_trajectory(p) for p in train_frames)
    names = list(sim.FAMILIES[ds.family].channel_names)
    manifest = data.DatasetManifest(entries=entries, stats=stats, C=ds.context,
                                    F=ds.future, channel_names=names)
    data.save_manifest(manifest, os.path.join(ds.out_dir, "manifest.tsv"))
    _log(f"generate: wrote {len(entries)} trajectories "
         f"({len(train_frames)} train) to {ds.out_dir}")
    return 0


# ------------------------------------------------------------------- train

def _load_split(cfg: ExperimentConfig, manifest, split):
    base = cfg.dataset.out_dir
    return [data.load_trajectory(os.path.join(base, e.path))
            for e in manifest.split_entries(split)]


def _manifest_path(cfg):
    return os.path.join(cfg.dataset.out_dir, "manifest.tsv")


def _checkpoint_path(cfg):
    return os.path.join(cfg.train.out_dir, "checkpoint.pdew")


def _net_config(cfg: ExperimentConfig, manifest) -> net.NetConfig:
    return net.NetConfig(frames=manifest.C + manifest.F,
                         channels=len(manifest.channel_names),
                         hidden_channels=cfg.net.hidden_channels,
                         depth=cfg.net.depth, kernel=cfg.net.kernel,
                         embed_dim=cfg.net.embed_dim,
                         level_scale=cfg.sampler.train_levels,
                         dtype=cfg.net.dtype)


def _train_config(cfg: ExperimentConfig) -> diffusion.TrainConfig:
    t = cfg.train
    return diffusion.TrainConfig(objective=t.objective, batch_size=t.batch_size,
                                 epochs=t.epochs, learning_rate=t.learning_rate,
                                 beta1=t.beta1, beta2=t.beta2, adam_eps=t.adam_eps,
                                 seed=t.seed, segments_per_epoch=t.segments_per_epoch)


def _write_loss_curve(path, curve):
    rollout.write_csv(path, ["epoch", "mean_loss"],
                      [[str(i), f"{v:.10g}"] for i, v in enumerate(curve)])


def cmd_train(cfg: ExperimentConfig) -> int:
    manifest = data.load_manifest(_manifest_path(cfg))
    trajs = _load_split(cfg, manifest, "train")
    if not trajs:
        raise DataError("manifest has no train trajectories")
    ncfg = _net_config(cfg, manifest)
    _log(f"train: denoiser with {net.param_count(ncfg)} parameters")
    os.makedirs(cfg.train.out_dir, exist_ok=True)
    ckpt = _checkpoint_path(cfg)
    state_path = os.path.join(cfg.train.out_dir, "train_state.npz")
    loss_path = os.path.join(cfg.train.out_dir, "loss_curve.csv")

    if cfg.train.resume and os.path.exists(ckpt) and os.path.exists(state_path):
        params = net.load_checkpoint(ckpt, ncfg)
        state = diffusion.TrainState.load(state_path)
        _log(f"train: resuming from epoch {state.epoch}")
    else:
        params = net.init_params(ncfg, cfg.train.seed)
        state = None

    schedule = diffusion.cosine_schedule(cfg.sampler.train_levels)
    store = data.SegmentStore(trajs, manifest.stats, manifest.C, manifest.F,
                              stride=cfg.dataset.stride, dtype=ncfg.np_dtype)
    tcfg = _train_config(cfg)

    def on_epoch(epoch, st):
        net.save_checkpoint(ckpt, params)
        st.save(state_path)
        _write_loss_curve(loss_path, st.loss_curve)
        _log(f"train: epoch {epoch} mean loss {st.loss_curve[-1]:.6f}")

    try:
        state = diffusion.train(params, store, tcfg, schedule, manifest.C,
                                state=state, epoch_callback=on_epoch)
    except NumericFailure:
        net.save_checkpoint(ckpt, params)   # params restored to last good epoch
        raise
    net.save_checkpoint(ckpt, params)
    if state is not None:
        state.save(state_path)
        _write_loss_curve(loss_path, state.loss_curve)
    _log(f"train: wrote {ckpt}")
    return 0


# -------------------------------------------------------------------- eval

def _planner_for(mode_str: str, cfg: ExperimentConfig) -> PlannerConfig:
    p = cfg.planner
    if mode_str == "adaptive" or mode_str == "derivative":
        return PlannerConfig(mode=mode_str, tau=p.tau, fuse=p.fuse, prefix=p.prefix)
    if mode_str == "fixed":
        return PlannerConfig(mode="fixed", fixed_s=p.fixed_s, fuse=p.fuse)
    if mode_str.startswith("fixed:"):
        return PlannerConfig(mode="fixed", fixed_s=int(mode_str.split(":", 1)[1]),
                             fuse=p.fuse)
    raise ConfigError(f"unknown eval mode {mode_str!r}")


def _sampler_config(cfg: ExperimentConfig, mode: str) -> diffusion.SamplerConfig:
    # fixed-step rollouts need no spread estimate: a single sample suffices
    K = cfg.sampler.k_samples if mode in ("adaptive",) else 1
    return diffusion.SamplerConfig(steps=cfg.sampler.steps, eta=cfg.sampler.eta, K=K,
                                   clip_x0=cfg.sampler.clip_x0)


def _make_sample_fn(cfg, model, schedule, sampler_cfg, F):
    if cfg.train.objective == "regression":
        return diffusion.make_direct_predictor(model, F)
    return diffusion.make_ddim_sampler(model, schedule, sampler_cfg, F)


def _eval_one(model, schedule, cfg, mode_str, traj, manifest, rng):
    """Roll out one trajectory under one mode and score it."""
    C, F = manifest.C, manifest.F
    frames = np.asarray(traj.frames, dtype=np.float64)
    context = data.normalize(frames[:C], manifest.stats).astype(model.cfg.np_dtype)
    pcfg = _planner_for(mode_str, cfg)
    scfg = _sampler_config(cfg, pcfg.mode)
    sample_fn = _make_sample_fn(cfg, model, schedule, scfg, F)
    result = rollout.autoregressive_rollout(sample_fn, pcfg, context,
                                            frames.shape[0], rng, F)
    report = rollout.score_rollout(result, frames[C:], manifest.stats, pcfg, F)
    return report, pcfg, scfg


def _eval_rng(cfg, mode_str, traj_seed):
    key = zlib.crc32(mode_str.encode())   # stable across processes, unlike hash()
    return np.random.default_rng(np.random.SeedSequence(
        entropy=cfg.eval.seed, spawn_key=(17, key, traj_seed)))


def _test_set(cfg, manifest):
    trajs = _load_split(cfg, manifest, "test")
    if not trajs:
        raise DataError("manifest has no test trajectories")
    if cfg.eval.max_trajectories > 0:
        trajs = trajs[:cfg.eval.max_trajectories]
    return trajs


def cmd_eval(cfg: ExperimentConfig) -> int:
    manifest = data.load_manifest(_manifest_path(cfg))
    ncfg = _net_config(cfg, manifest)
    if not os.path.exists(_checkpoint_path(cfg)):
        raise DataError(f"checkpoint not found: {_checkpoint_path(cfg)}")
    params = net.load_checkpoint(_checkpoint_path(cfg), ncfg)
    model = net.Denoiser(params)
    schedule = diffusion.cosine_schedule(cfg.sampler.train_levels)
    trajs = _test_set(cfg, manifest)
    modes = cfg.eval.mode_list()
    os.makedirs(cfg.eval.out_dir, exist_ok=True)
    F = manifest.F

    report_rows = []
    step_rows = []
    timing_rows = []
    curves = {}
    hists = {}

    for mode_str in modes:
        def run_one(traj, mode_str=mode_str):
            rng = _eval_rng(cfg, mode_str, traj.seed)
            return traj.seed, _eval_one(model, schedule, cfg, mode_str, traj,
                                        manifest, rng)
        outs = _fanout(run_one, trajs)
        rs = []
        for seed, (report, pcfg, scfg) in outs:
            tau = pcfg.tau if pcfg.mode in ("adaptive", "derivative") else 0.0
            report_rows.append(rollout.report_row(seed, mode_str, tau, scfg, report,
                                                  zero_timings=cfg.eval.deterministic))
            step_rows.extend(rollout.step_log_rows(seed, mode_str, report, F))
            timing_rows.append([str(seed), mode_str, f"{report.forward_seconds:.6f}",
                                f"{report.select_seconds:.6f}"])
            rs.append(report)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            curves[mode_str] = np.nanmean(np.stack([r.r_curve for r in rs]), axis=0)
        hists[mode_str] = np.sum([r.step_histogram for r in rs], axis=0)
        mean_rel = float(np.mean([r.rel_l2 for r in rs]))
        _log(f"eval: mode {mode_str}: mean rel_l2 {mean_rel:.4f}, "
             f"mean t_above {np.mean([r.t_above for r in rs]):.3f}")

    rollout.write_csv(os.path.join(cfg.eval.out_dir, "report.csv"),
                      rollout.REPORT_HEADER, report_rows)
    rollout.write_csv(os.path.join(cfg.eval.out_dir, "step_log.csv"),
                      rollout.step_log_header(F), step_rows)
    if not cfg.eval.deterministic:
        rollout.write_csv(os.path.join(cfg.eval.out_dir, "timings.csv"),
                          ["trajectory_id", "mode", "forward_s", "select_s"],
                          timing_rows)

    rho = None
    if cfg.eval.corr_enabled and cfg.train.objective == "diffusion":
        scfg = diffusion.SamplerConfig(steps=cfg.sampler.steps, eta=cfg.sampler.eta,
                                       K=max(2, cfg.sampler.k_samples),
                                       clip_x0=cfg.sampler.clip_x0)
        rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.eval.seed,
                                                           spawn_key=(19,)))
        try:
            rho, rows, fit = rollout.uncertainty_error_correlation(
                model, schedule, scfg, trajs, manifest.stats, manifest.C, F,
                rng, stride=cfg.eval.corr_stride, fuse=cfg.planner.fuse)
            rollout.write_csv(os.path.join(cfg.eval.out_dir, "scatter.csv"),
                              ["eps_hat", "rel_err", "frame_offset"],
                              [[f"{e:.10g}", f"{r:.10g}", str(t)] for e, r, t in rows])
            plotting.scatter_plot(os.path.join(cfg.eval.out_dir, "scatter.png"),
                                  [r[0] for r in rows], [r[1] for r in rows], fit=fit,
                                  title=f"uncertainty vs error (rho={rho:.3f})",
                                  xlabel="eps_hat", ylabel="per-frame rel l2")
            _log(f"eval: uncertainty-error rho = {rho:.4f}")
        except DegenerateCorrelation as e:
            _log(f"warning: correlation analysis skipped: {e}")

    n_pred = trajs[0].frames.shape[0] - manifest.C
    plotting.line_plot(os.path.join(cfg.eval.out_dir, "r_curves.png"),
                       [(np.arange(1, n_pred + 1), curves[m]) for m in modes],
                       labels=modes, title="per-timestep correlation",
                       xlabel="timestep", ylabel="r")
    for mode_str in modes:
        if hists[mode_str].sum() > 0:
            plotting.histogram_plot(
                os.path.join(cfg.eval.out_dir, f"step_hist_{mode_str.replace(':', '')}.png"),
                hists[mode_str], title=f"selected step sizes ({mode_str})",
                xlabel="step size s")
    _write_summary(cfg.eval.out_dir, report_rows, rho)
    return 0


def _write_summary(out_dir, report_rows, rho):
    by_mode = {}
    for row in report_rows:
        by_mode.setdefault(row[1], []).append(row)
    lines = []
    for mode, rows in by_mode.items():
        rel = np.mean([float(r[5]) for r in rows])
        tab = np.mean([float(r[6]) for r in rows])
        avg = np.mean([float(r[7]) for r in rows])
        nfe = np.mean([float(r[8]) for r in rows])
        lines.append(f"mode={mode} n={len(rows)} mean_rel_l2={rel:.6f} "
                     f"mean_t_above={tab:.4f} mean_avg_step={avg:.3f} mean_nfe={nfe:.1f}")
    if rho is not None:
        lines.append(f"uncertainty_error_rho={rho:.6f}")
    with open(os.path.join(out_dir, "summary.txt"), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    for line in lines:
        _log("summary: " + line)


# ------------------------------------------------------------------- sweep

SWEEP_HEADER = ["axis", "value", "rel_l2", "t_above", "avg_step", "nfe",
                "forward_s", "select_s"]


def cmd_sweep(cfg: ExperimentConfig, axis: str, values) -> int:
    if axis not in ("tau", "K", "S"):
        raise ConfigError(f"sweep axis must be tau, K or S, got {axis!r}")
    if not values:
        raise ConfigError("sweep needs a non-empty comma-separated --values list")
    manifest = data.load_manifest(_manifest_path(cfg))
    ncfg = _net_config(cfg, manifest)
    params = net.load_checkpoint(_checkpoint_path(cfg), ncfg)
    model = net.Denoiser(params)
    schedule = diffusion.cosine_schedule(cfg.sampler.train_levels)
    trajs = _test_set(cfg, manifest)
    os.makedirs(cfg.eval.out_dir, exist_ok=True)
    F = manifest.F

    rows = []
    for v in values:
        tau = cfg.planner.tau
        steps, K = cfg.sampler.steps, max(2, cfg.sampler.k_samples)
        if axis == "tau":
            tau = float(v)
        elif axis == "K":
            K = int(v)
        else:
            steps = int(v)
        pcfg = PlannerConfig(mode="adaptive", tau=tau, fuse=cfg.planner.fuse,
                             prefix=cfg.planner.prefix)
        scfg = diffusion.SamplerConfig(steps=steps, eta=cfg.sampler.eta, K=K,
                                       clip_x0=cfg.sampler.clip_x0)

        def run_one(traj):
            rng = _eval_rng(cfg, f"sweep-{axis}-{v}", traj.seed)
            frames = np.asarray(traj.frames, dtype=np.float64)
            ctx = data.normalize(frames[:manifest.C], manifest.stats).astype(ncfg.np_dtype)
            sample_fn = diffusion.make_ddim_sampler(model, schedule, scfg, F)
            res = rollout.autoregressive_rollout(sample_fn, pcfg, ctx,
                                                 frames.shape[0], rng, F)
            return rollout.score_rollout(res, frames[manifest.C:], manifest.stats,
                                         pcfg, F)
        reports = _fanout(run_one, trajs)
        fwd = np.sum([r.forward_seconds for r in reports])
        sel = np.sum([r.select_seconds for r in reports])
        if cfg.eval.deterministic:
            fwd = sel = 0.0
        rows.append([axis, f"{float(v):.6g}",
                     f"{np.mean([r.rel_l2 for r in reports]):.10g}",
                     f"{np.mean([r.t_above for r in reports]):.10g}",
                     f"{np.mean([r.avg_step for r in reports]):.10g}",
                     f"{np.mean([r.nfe for r in reports]):.10g}",
                     f"{fwd:.6f}", f"{sel:.6f}"])
        _log(f"sweep {axis}={v}: rel_l2 {rows[-1][2]}, avg_step {rows[-1][4]}")

    out_csv = os.path.join(cfg.eval.out_dir, f"sweep_{axis}.csv")
    rollout.write_csv(out_csv, SWEEP_HEADER, rows)
    plotting.scatter_plot(os.path.join(cfg.eval.out_dir, f"sweep_{axis}.png"),
                          [float(r[4]) for r in rows], [float(r[2]) for r in rows],
                          title=f"{axis} sweep", xlabel="avg step", ylabel="rel l2")
    _log(f"sweep: wrote {out_csv}")
    return 0


# ------------------------------------------------------------------ report

def _read_csv(path):
    if not os.path.exists(path):
        return None, []
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    return rows[0], rows[1:]


def cmd_report(cfg: ExperimentConfig) -> int:
    out = cfg.eval.out_dir
    header, rows = _read_csv(os.path.join(out, "report.csv"))
    if header is None:
        raise DataError(f"no report.csv under {out}; run eval first")
    rho = None
    _, scatter = _read_csv(os.path.join(out, "scatter.csv"))
    if scatter:
        eps = np.array([float(r[0]) for r in scatter])
        err = np.array([float(r[1]) for r in scatter])
        if eps.std() > 0 and err.std() > 0:
            rho = float(np.corrcoef(eps, err)[0, 1])
            slope, intercept = np.polyfit(eps, err, 1)
            plotting.scatter_plot(os.path.join(out, "scatter.png"), eps, err,
                                  fit=(slope, intercept),
                                  title=f"uncertainty vs error (rho={rho:.3f})",
                                  xlabel="eps_hat", ylabel="per-frame rel l2")
    _write_summary(out, rows, rho)
    for axis in ("tau", "K", "S"):
        _, srows = _read_csv(os.path.join(out, f"sweep_{axis}.csv"))
        if srows:
            plotting.scatter_plot(os.path.join(out, f"sweep_{axis}.png"),
                                  [float(r[4]) for r in srows],
                                  [float(r[2]) for r in srows],
                                  title=f"{axis} sweep", xlabel="avg step",
                                  ylabel="rel l2")
    loss_header, loss_rows = _read_csv(os.path.join(cfg.train.out_dir, "loss_curve.csv"))
    if loss_rows:
        plotting.line_plot(os.path.join(out, "loss_curve.png"),
                           [([int(r[0]) for r in loss_rows],
                             [float(r[1]) for r in loss_rows])],
                           title="training loss", xlabel="epoch", ylabel="mean loss")
    _log(f"report: refreshed summaries under {out}")
    return 0


# -------------------------------------------------------------------- main

def _split_overrides(args):
    """Pull --section.key=value tokens out of the raw argument list."""
    rest, overrides = [], []
    for a in args:
        if a.startswith("--") and "." in a.split("=", 1)[0] and "=" in a:
            overrides.append(a[2:])
        else:
            rest.append(a)
    return rest, overrides


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    rest, overrides = _split_overrides(argv)
    parser = argparse.ArgumentParser(
        prog="pderoll",
        description="adaptive-rollout PDE forecasting with a diffusion surrogate")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in ("generate", "train", "eval", "sweep", "report"):
        p = sub.add_parser(verb)
        p.add_argument("-c", "--config", required=True)
        if verb == "sweep":
            p.add_argument("--axis", required=True, choices=["tau", "K", "S"])
            p.add_argument("--values", required=True,
                           help="comma-separated axis values")
    try:
        ns = parser.parse_args(rest)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0

    try:
        cfg = load_config(ns.config, overrides)
        if ns.verb == "generate":
            return cmd_generate(cfg)
        if ns.verb == "train":
            return cmd_train(cfg)
        if ns.verb == "eval":
            return cmd_eval(cfg)
        if ns.verb == "sweep":
            values = [v.strip() for v in ns.values.split(",") if v.strip()]
            return cmd_sweep(cfg, ns.axis, values)
        return cmd_report(cfg)
    except ConfigError as e:
        _log(f"config error: {e}")
        return 2
    except DataError as e:
        _log(f"data error: {e}")
        return 3
    except NumericFailure as e:
        _log(f"numeric failure: {e}")
        return 4


if __name__ == "__main__":
    sys.exit(main())
