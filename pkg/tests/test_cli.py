"""CLI verbs end to end at miniature scale: file outputs, determinism,
error exit codes, and the sweep fallback behaviors."""

import csv
import os

import numpy as np
import pytest

from pderoll import cli, data, diffusion, net
from pderoll.config import load_config

MINI = """
[dataset]
family = anisotropic_diffusion
nx = 16
ny = 16
train_trajectories = 5
test_trajectories = 2
horizon = 14
context = 2
future = 4

[net]
hidden_channels = 6
depth = 1
embed_dim = 8

[train]
epochs = 1
batch_size = 8
segments_per_epoch = 16
learning_rate = 1e-3

[sampler]
train_levels = 50
steps = 4
k_samples = 2

[eval]
max_trajectories = 2
deterministic = true
"""


def write_mini(tmp_path, extra=""):
    p = tmp_path / "exp.ini"
    p.write_text(MINI + extra)
    return str(p)


def run(args):
    return cli.main(args)


def read_rows(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return rows[0], rows[1:]


@pytest.fixture(scope="module")
def mini_ws(tmp_path_factory):
    """Generated + trained miniature workspace shared by the read-only tests."""
    root = tmp_path_factory.mktemp("mini")
    cfgp = write_mini(root)
    assert run(["generate", "-c", cfgp]) == 0
    assert run(["train", "-c", cfgp]) == 0
    return root, cfgp


def test_generate_manifest_counts(mini_ws):
    root, cfgp = mini_ws
    cfg = load_config(cfgp)
    manifest = data.load_manifest(os.path.join(cfg.dataset.out_dir, "manifest.tsv"))
    assert len(manifest.split_entries("train")) == 5
    assert len(manifest.split_entries("test")) == 2
    assert manifest.C == 2 and manifest.F == 4


def test_generate_rerun_bitwise_identical(tmp_path):
    cfgp = write_mini(tmp_path)
    assert run(["generate", "-c", cfgp]) == 0
    cfg = load_config(cfgp)
    first = {}
    for name in sorted(os.listdir(cfg.dataset.out_dir)):
        first[name] = open(os.path.join(cfg.dataset.out_dir, name), "rb").read()
    assert run(["generate", "-c", cfgp]) == 0
    for name, blob in first.items():
        assert open(os.path.join(cfg.dataset.out_dir, name), "rb").read() == blob


def test_generate_stats_match_recomputation(mini_ws):
    """Stored normalization stats equal a recompute from the written files."""
    root, cfgp = mini_ws
    cfg = load_config(cfgp)
    manifest = data.load_manifest(os.path.join(cfg.dataset.out_dir, "manifest.tsv"))
    trajs = [data.load_trajectory(os.path.join(cfg.dataset.out_dir, e.path))
             for e in manifest.split_entries("train")]
    stats = data.fit_normalization(trajs)
    assert np.abs(stats.mean - manifest.stats.mean).max() <= 1e-12
    assert np.abs(stats.std - manifest.stats.std).max() <= 1e-12


def test_train_zero_epochs_equals_init(tmp_path):
    cfgp = write_mini(tmp_path)
    assert run(["generate", "-c", cfgp]) == 0
    assert run(["train", "-c", cfgp, "--train.epochs=0"]) == 0
    cfg = load_config(cfgp)
    manifest = data.load_manifest(os.path.join(cfg.dataset.out_dir, "manifest.tsv"))
    ncfg = cli._net_config(cfg, manifest)
    got = net.load_checkpoint(os.path.join(cfg.train.out_dir, "checkpoint.pdew"), ncfg)
    init = net.init_params(ncfg, cfg.train.seed)
    assert np.array_equal(got.vector, init.vector)


def test_train_deterministic_checkpoints(tmp_path):
    blobs = []
    for sub in ("a", "b"):
        d = tmp_path / sub
        d.mkdir()
        cfgp = write_mini(d)
        assert run(["generate", "-c", cfgp]) == 0
        assert run(["train", "-c", cfgp]) == 0
        cfg = load_config(cfgp)
        blobs.append(open(os.path.join(cfg.train.out_dir, "checkpoint.pdew"),
                          "rb").read())
    assert blobs[0] == blobs[1]


def test_eval_fixed_modes_emit_rows_per_trajectory(mini_ws):
    root, cfgp = mini_ws
    modes = "fixed:1,fixed:2,fixed:3,fixed:4"
    assert run(["eval", "-c", cfgp, f"--eval.modes={modes}",
                "--eval.corr_enabled=false"]) == 0
    cfg = load_config(cfgp)
    header, rows = read_rows(os.path.join(cfg.eval.out_dir, "report.csv"))
    assert header == ["trajectory_id", "mode", "tau", "K", "S", "rel_l2", "t_above",
                      "avg_step", "nfe", "forward_s", "select_s"]
    assert len(rows) == 4 * 2      # 4 fixed modes x 2 test trajectories
    by_traj = {}
    for r in rows:
        by_traj.setdefault(r[0], []).append(r[1])
    for traj_modes in by_traj.values():
        assert sorted(traj_modes) == sorted(modes.split(","))
    # deterministic mode zeroes wall-time columns
    assert all(float(r[9]) == 0.0 and float(r[10]) == 0.0 for r in rows)


def test_eval_adaptive_avg_step_matches_step_log(mini_ws):
    root, cfgp = mini_ws
    assert run(["eval", "-c", cfgp, "--eval.modes=adaptive",
                "--planner.tau=5.0", "--eval.corr_enabled=false"]) == 0
    cfg = load_config(cfgp)
    _, rows = read_rows(os.path.join(cfg.eval.out_dir, "report.csv"))
    _, steps = read_rows(os.path.join(cfg.eval.out_dir, "step_log.csv"))
    for row in rows:
        ss = [int(s[4]) for s in steps if s[0] == row[0] and s[1] == "adaptive"]
        assert float(row[7]) == pytest.approx(np.mean(ss), abs=1e-9)
        assert int(row[8]) == len(ss) * cfg.sampler.steps    # NFE accounting


def test_eval_oracle_model_scores_zero(mini_ws, monkeypatch):
    """A sampler that returns the exact future gives rel_l2 = 0 everywhere."""
    root, cfgp = mini_ws
    cfg = load_config(cfgp)
    manifest = data.load_manifest(os.path.join(cfg.dataset.out_dir, "manifest.tsv"))
    tests = [data.load_trajectory(os.path.join(cfg.dataset.out_dir, e.path))
             for e in manifest.split_entries("test")]
    normed = [data.normalize(t.frames.astype(np.float64), manifest.stats)
              .astype(np.float32) for t in tests]
    C, F = manifest.C, manifest.F

    def fake_make_sampler(model, schedule, scfg, future):
        def sample_fn(ctx, rng):
            best, bt, bi = None, None, None
            for ti, fr in enumerate(normed):
                for t0 in range(fr.shape[0] - C + 1):
                    d = float(np.abs(fr[t0:t0 + C] - ctx).sum())
                    if best is None or d < best:
                        best, bt, bi = d, t0, ti
            fut = normed[bi][bt + C:bt + C + F]
            while fut.shape[0] < F:
                fut = np.concatenate([fut, fut[-1:]], axis=0)
            return np.repeat(fut[None], scfg.K, axis=0), scfg.steps
        return sample_fn

    monkeypatch.setattr(cli.diffusion, "make_ddim_sampler", fake_make_sampler)
    assert run(["eval", "-c", cfgp, "--eval.modes=fixed:2",
                "--eval.corr_enabled=false"]) == 0
    _, rows = read_rows(os.path.join(cfg.eval.out_dir, "report.csv"))
    assert rows and all(float(r[5]) <= 1e-5 for r in rows)
    assert all(float(r[6]) == 1.0 for r in rows)


def test_sweep_tau_extremes(mini_ws):
    root, cfgp = mini_ws
    assert run(["sweep", "-c", cfgp, "--axis", "tau",
                "--values", "0.0001,1e9"]) == 0
    cfg = load_config(cfgp)
    _, rows = read_rows(os.path.join(cfg.eval.out_dir, "sweep_tau.csv"))
    assert float(rows[0][4]) == 1.0                  # everything rejected
    assert float(rows[1][4]) == cfg.dataset.future   # everything accepted


def test_sweep_requires_values(mini_ws):
    root, cfgp = mini_ws
    assert run(["sweep", "-c", cfgp, "--axis", "tau", "--values", " "]) == 2


def test_unknown_key_and_flag_exit_2(tmp_path):
    cfgp = write_mini(tmp_path)
    assert run(["generate", "-c", cfgp, "--dataset.nz=3"]) == 2
    assert run(["generate", "-c", cfgp, "--turbo"]) == 2
    bad = tmp_path / "bad.ini"
    bad.write_text("[dataset]\nfamly = x\n")
    assert run(["generate", "-c", str(bad)]) == 2
    assert run(["generate", "-c", str(tmp_path / "missing.ini")]) == 2


def test_missing_manifest_and_checkpoint_exit_3(tmp_path):
    cfgp = write_mini(tmp_path)
    assert run(["train", "-c", cfgp]) == 3
    assert run(["generate", "-c", cfgp]) == 0
    assert run(["eval", "-c", cfgp]) == 3


def test_report_regenerates_outputs(mini_ws):
    root, cfgp = mini_ws
    assert run(["eval", "-c", cfgp, "--eval.modes=adaptive"]) == 0
    cfg = load_config(cfgp)
    summary = os.path.join(cfg.eval.out_dir, "summary.txt")
    os.remove(summary)
    assert run(["report", "-c", cfgp]) == 0
    assert os.path.exists(summary)
    assert os.path.exists(os.path.join(cfg.eval.out_dir, "loss_curve.png"))


def test_end_to_end_determinism_mini(tmp_path):
    """generate + train + eval twice: bitwise-identical CSV outputs."""
    outs = []
    for sub in ("r1", "r2"):
        d = tmp_path / sub
        d.mkdir()
        cfgp = write_mini(d)
        for verb in ("generate", "train", "eval"):
            assert run([verb, "-c", cfgp]) == 0
        cfg = load_config(cfgp)
        blob = {}
        for name in sorted(os.listdir(cfg.eval.out_dir)):
            if name.endswith(".csv") or name.endswith(".txt"):
                blob[name] = open(os.path.join(cfg.eval.out_dir, name), "rb").read()
        blob["loss"] = open(os.path.join(cfg.train.out_dir, "loss_curve.csv"),
                            "rb").read()
        outs.append(blob)
    assert outs[0].keys() == outs[1].keys()
    for name in outs[0]:
        assert outs[0][name] == outs[1][name], f"{name} differs between runs"
