"""Acceptance checks, one test group per numbered criterion.

The terminal summary prints a single PASS/FAIL line per criterion. Criteria
5 to 7 need ten desk-scale training runs (P3 and P0, seeds 0-4). Finished
runs are cached under ``.acceptance_runs/<source hash>/`` (or
``$MCARL_ACCEPTANCE_DIR``) together with their measured wall time, so only
a change to the package sources triggers retraining.
"""
import hashlib
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

import mcarl
from mcarl.checkpoint import file_hash, load_checkpoint
from mcarl.config import load_run_config
from mcarl.diffcore import LstmState, finite_diff_check
from mcarl.env import EnvConfig, top_speed
from mcarl.hacl import (BinGrid, CurriculumConfig, RewardPredictor, make_curriculum, sample_command_from_bins,
                        train_rnn_predictor, update_bin_weights)
from mcarl.morphology import INDEX, MORPH_DIM, DistanceWeights, default_range, morphology_distance, sample_morphology
from mcarl.policy import ActionDistribution, McarlPolicy, NetworkSizes, gaussian_logprob_entropy
from mcarl.ppo import compute_gae, ppo_surrogate_loss, ppo_value_loss
from mcarl.presets import builtin_presets
from mcarl.rewards import RewardWeights, tracking_reward
from mcarl.trainer import read_metrics, run_training
from mcarl.transfer import build_transfer_matrix, distance_performance_correlation

SEEDS = range(5)
HELD_OUT = ("Go2", "MiniCheetah", "A1")
SRC = Path(mcarl.__file__).resolve().parent


def _source_key():
    h = hashlib.sha1()
    for p in sorted(SRC.rglob("*")):
        if p.suffix in (".py", ".yaml"):
            h.update(p.relative_to(SRC).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()[:12]


def _cache_root():
    base = os.environ.get("MCARL_ACCEPTANCE_DIR") or SRC.parents[1] / ".acceptance_runs"
    return Path(base) / _source_key()


def desk_run(variant, seed):
    """Train (or reuse) a default-config run; returns (run dir, wall seconds)."""
    out = _cache_root() / f"{variant}_s{seed}"
    stamp = out / "timing.json"
    if stamp.exists():
        return out, json.loads(stamp.read_text())["seconds"]
    cfg = load_run_config(overrides=[f"variant={variant}", f"seed={seed}", f"output_dir={out}"])
    assert cfg.num_envs == 64 and cfg.iterations == 300
    t0 = time.perf_counter()
    run_training(cfg)
    seconds = time.perf_counter() - t0
    stamp.write_text(json.dumps({"seconds": seconds}))
    return out, seconds


@pytest.fixture(scope="session")
def p3_runs():
    return {s: desk_run("P3", s) for s in SEEDS}


@pytest.fixture(scope="session")
def p0_runs():
    return {s: desk_run("P0", s) for s in SEEDS}


@pytest.fixture(scope="session")
def transfer_report(p3_runs, p0_runs):
    ckpts = {("P3", s): d / "checkpoints" / "last.ckpt" for s, (d, _) in p3_runs.items()}
    ckpts.update({("P0", s): d / "checkpoints" / "last.ckpt" for s, (d, _) in p0_runs.items()})
    return build_transfer_matrix(ckpts, builtin_presets())


# -- 1 ------------------------------------------------------------------

# gradients below this are judged by absolute error: central differences at
# h=1e-5 carry about 1e-11 of round-off
FD_FLOOR = 1e-6


def _mlp_error(net, store, rng, batch=3):
    x = rng.normal(size=(batch, net.in_dim))
    t = rng.normal(size=(batch, net.out_dim))

    def loss():
        return 0.5 * float(np.sum((net(x) - t) ** 2))

    def loss_and_grad():
        out = net.forward(x)
        net.backward(out - t, need_input_grad=False)
        return 0.5 * float(np.sum((out - t) ** 2))

    return finite_diff_check(store, loss, loss_and_grad, names=net.param_names(), max_entries=400, rng=rng,
                             floor=FD_FLOOR)


def _lstm_error(rng, n_bins=50, hidden=8, T=12):
    pred = RewardPredictor(n_bins, hidden=hidden, rng=rng)
    bins = rng.integers(0, n_bins, T)
    targets = rng.normal(size=(T, 2))
    r_prev = np.vstack([np.zeros((1, 2)), targets[:-1]])
    s0 = LstmState(rng.normal(size=hidden) * 0.5, rng.normal(size=hidden) * 0.5)

    def loss():
        pre = pred.projection(bins, r_prev)[:, None, :]
        hs, _ = pred.lstm.recur(pre, LstmState(s0.hidden[None], s0.cell[None]))
        return float(np.mean((pred.readout_pairs(hs[:, 0, :], bins) - targets) ** 2))

    def loss_and_grad():
        return pred.chunk_loss_and_grad(bins, r_prev, targets, s0)[0]

    return finite_diff_check(pred.store, loss, loss_and_grad, max_entries=1000, rng=rng, floor=FD_FLOOR)


@pytest.mark.criterion(1)
def test_gradient_suite(record_property):
    sizes = NetworkSizes(student_hidden=(64, 32), actor_hidden=(64, 32, 16), critic_hidden=(64, 32, 16))
    worst = {}
    t0 = time.perf_counter()
    for trial in range(20):
        rng = np.random.default_rng(100 + trial)
        pol = McarlPolicy(sizes, rng)
        for fam, net, store in (("encoder", pol.morph_encoder, pol.store), ("teacher", pol.teacher, pol.store),
                                ("student", pol.student, pol.student_store), ("actor", pol.actor, pol.store),
                                ("critic", pol.critic, pol.store)):
            worst[fam] = max(worst.get(fam, 0.0), _mlp_error(net, store, rng))
        worst["lstm"] = max(worst.get("lstm", 0.0), _lstm_error(rng))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"max rel err {max(worst.values()):.2e}, {elapsed:.0f}s")
    assert pol.student.in_dim == 1800 and pol.teacher.sizes == (18, 256, 128, 18)
    assert pol.morph_encoder.sizes == (14, 128, 64)
    for fam, err in worst.items():
        assert err < 1e-4, fam
    assert elapsed < 120


# -- 2 ------------------------------------------------------------------

@pytest.mark.criterion(2)
def test_closed_forms():
    assert abs(ppo_surrogate_loss([1.0], [1.0], 0.2) - (-1.0)) < 1e-9
    assert abs(ppo_surrogate_loss([1.5], [1.0], 0.2) - (-1.2)) < 1e-9
    assert abs(ppo_surrogate_loss([0.5], [-1.0], 0.2) - 0.8) < 1e-9
    assert ppo_value_loss([1.0], [1.0], [1.0], 0.2) == 0.0
    adv, ret = compute_gae([1.0], [0.5], [1.0], [123.0], 0.99, 0.95)
    assert abs(adv[0] - 0.5) < 1e-9 and abs(ret[0] - 1.0) < 1e-9
    w = RewardWeights()
    v = np.array([0.7, -0.2])
    assert abs(tracking_reward(v, v, w.tracking_sigma, w.tracking_lin_vel) - 3.0) < 1e-9
    _, ent = gaussian_logprob_entropy(ActionDistribution(np.zeros(1), np.zeros(1)), np.zeros(1))
    assert abs(ent - 0.5 * math.log(2 * math.pi * math.e)) < 1e-9


# -- 3 ------------------------------------------------------------------

GRID = BinGrid(counts=(5, 2, 5), low=(-1.0, -1.0, -1.0), high=(1.0, 1.0, 1.0))


def _curriculum(**kw):
    kw.setdefault("hidden", 16)
    return make_curriculum(CurriculumConfig(initial_high=(1.0, 1.0, 1.0), **kw), GRID,
                           rng=np.random.default_rng(0))


@pytest.mark.criterion(3)
def test_weight_update_direction():
    rng = np.random.default_rng(3)
    st = _curriculum()
    bins = np.array([0, 1])
    for _ in range(10_000):
        w0 = rng.uniform(0.01, 5.0)
        st.weights[bins] = w0
        pred = rng.normal(0.0, 3.0, (2, 2))
        alpha = rng.uniform(0.01, 1.0)
        hi, lo = np.argsort(pred.sum(axis=1))[::-1]
        update_bin_weights(st, pred, alpha=alpha, bins=bins)
        w = st.weights[bins]
        # equal start: the better-predicted bin ends at least as heavy
        assert w[hi] >= w[lo]
        if w[lo] > 0:
            assert w[hi] / w[lo] >= 1.0


@pytest.mark.criterion(3)
def test_sampling_frequencies():
    st = _curriculum()
    st.box[:] = [[0, 2], [0, 0], [0, 1]]
    active = st.active_bins
    st.weights[:] = 0.0
    st.weights[active] = np.arange(1, len(active) + 1, dtype=float)
    _, drawn = sample_command_from_bins(st, np.random.default_rng(11), 100_000)
    freq = np.array([np.mean(drawn == b) for b in active])
    p = st.weights[active] / st.weights[active].sum()
    assert np.all(np.abs(freq - p) <= 0.05 * p)


@pytest.mark.criterion(3)
def test_predictor_fits_synthetic_function():
    st = _curriculum(hidden=32, lr=1e-2)
    rng = np.random.default_rng(5)
    bins = rng.integers(0, GRID.size, 256)
    c = GRID.center(bins)
    t = np.stack([1.5 + np.sin(2.0 * c[:, 0]) - 0.5 * c[:, 2] ** 2, 2.0 + 0.8 * c[:, 0] * c[:, 2]], axis=1)
    replay = list(zip(bins, t[:, 0], t[:, 1]))
    for _ in range(80):
        train_rnn_predictor(st, replay)
    pred = st.predictor
    r_prev = np.vstack([np.zeros((1, 2)), t[:-1]])
    h = LstmState.zeros(pred.hidden_size)
    out = []
    for k, b in enumerate(bins):
        hk, h = pred.step(h, int(b), r_prev[k])
        out.append(pred.readout_pairs(hk[None], np.array([b]))[0])
    mse = np.mean((np.array(out) - t) ** 2)
    assert mse < 0.05 * np.mean(np.var(t, axis=0))


# -- 4 ------------------------------------------------------------------

@pytest.mark.criterion(4)
def test_metric_axioms():
    rng = np.random.default_rng(4)
    mr = default_range()
    for k in range(1000):
        dw = DistanceWeights(rng.uniform(0.01, 5.0, MORPH_DIM), rng.normal(size=MORPH_DIM),
                             rng.uniform(0.05, 5.0, MORPH_DIM))
        if k % 2:
            a, b, c = sample_morphology(mr, rng, 3)
        else:
            a, b, c = rng.normal(0.0, 3.0, (3, MORPH_DIM))
        dab, dba = morphology_distance(a, b, dw), morphology_distance(b, a, dw)
        assert dab > 0.0 and dab == dba
        assert morphology_distance(a, a, dw) == 0.0
        assert morphology_distance(a, c, dw) <= dab + morphology_distance(b, c, dw) + 1e-12


# -- 5 to 7 -------------------------------------------------------------

@pytest.mark.slow
@pytest.mark.criterion(5)
def test_learning_smoke(p3_runs, record_property):
    ratios, ok = [], 0
    for seed, (run, seconds) in p3_runs.items():
        track = np.array([r["mean_tracking_reward"] for r in read_metrics(run)])
        assert len(track) == 300
        ratio = track[-10:].mean() / track[:10].mean()
        ratios.append(ratio)
        ok += ratio >= 3.0 and seconds < 15 * 60
    record_property("detail", "ratios " + ", ".join(f"{r:.1f}" for r in ratios)
                    + f"; max wall {max(s for _, s in p3_runs.values()) / 60:.1f} min")
    assert ok >= 4


@pytest.mark.slow
@pytest.mark.criterion(6)
def test_morphology_conditioning_benefit(transfer_report, record_property):
    wins, parts = 0, []
    for seed in SEEDS:
        means = {}
        for v in ("P3", "P0"):
            rows = [r for r in transfer_report.rows if r.variant == v and r.seed == seed]
            assert {r.eval_preset for r in rows} >= set(HELD_OUT) | {"Go1"}
            means[v] = np.mean([r.tracking for r in rows if r.eval_preset in HELD_OUT])
            self_row = [r for r in rows if r.eval_preset == "Go1"]
            assert len(self_row) == 1 and self_row[0].distance == 0.0
        wins += means["P3"] > means["P0"]
        parts.append(f"{means['P3']:.2f}/{means['P0']:.2f}")
    record_property("detail", "P3/P0 held-out tracking " + " ".join(parts))
    assert wins >= 4


@pytest.mark.slow
@pytest.mark.criterion(7)
def test_distance_transfer_correlation(transfer_report, record_property):
    corr = [c for c in distance_performance_correlation(transfer_report, "speed") if c.variant == "P3"]
    assert len(corr) == 5 and all(len(c.pairs) >= 4 for c in corr)
    good = sum(c.defined and c.rho <= 0.0 for c in corr)
    record_property("detail", "rho " + ", ".join(f"{c.rho:.2f}" if c.defined else "undef" for c in corr))
    assert good >= 4


# -- 8 ------------------------------------------------------------------

DET = ["num_envs=16", "iterations=8", "checkpoint_every=4"]


@pytest.mark.criterion(8)
def test_same_seed_bitwise_identical(tmp_path):
    for name in ("a", "b"):
        run_training(load_run_config(overrides=DET + [f"output_dir={tmp_path / name}"]))
    for ck in ("iter_000004.ckpt", "last.ckpt"):
        assert file_hash(tmp_path / "a" / "checkpoints" / ck) == file_hash(tmp_path / "b" / "checkpoints" / ck)


@pytest.mark.criterion(8)
def test_resume_reproduces_metrics(tmp_path):
    run_training(load_run_config(overrides=DET + [f"output_dir={tmp_path / 'full'}"]))
    cfg = load_run_config(overrides=DET + [f"output_dir={tmp_path / 'part'}"])
    run_training(cfg, stop_after=4)
    run_training(load_run_config(overrides=DET + [f"output_dir={tmp_path / 'part'}"]),
                 resume=str(tmp_path / "part" / "checkpoints" / "iter_000004.ckpt"))
    assert (tmp_path / "part" / "metrics.jsonl").read_bytes() == (tmp_path / "full" / "metrics.jsonl").read_bytes()
    a, _ = load_checkpoint(tmp_path / "full" / "checkpoints" / "last.ckpt")
    b, _ = load_checkpoint(tmp_path / "part" / "checkpoints" / "last.ckpt")
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


# -- 9 ------------------------------------------------------------------

@pytest.mark.criterion(9)
def test_surrogate_monotonicity():
    mr = default_range()
    cfg = EnvConfig()
    bases = [p.morphology for p in builtin_presets()] + list(sample_morphology(mr, np.random.default_rng(9), 4))
    for key, sign in (("base_mass", -1.0), ("hip_torque_limit", 1.0), ("calf_torque_limit", 1.0)):
        i = INDEX[key]
        for base in bases:
            m = np.tile(base, (5, 1))
            m[:, i] = np.linspace(mr.low[i], mr.high[i], 5)
            v = top_speed(cfg, m)
            assert np.all(sign * np.diff(v) >= -1e-6), (key, v)
