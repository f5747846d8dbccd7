from dataclasses import replace

import numpy as np
import pytest

from mcarl.diffcore import finite_diff_check
from mcarl.errors import ConfigError
from mcarl.policy import get_variant
from mcarl.ppo import (PPOConfig, ToyConfig, ToyTrackingEnv, collect_rollout, compute_batch_gae, compute_gae,
                       kl_adaptive_lr, normalize_advantages, ppo_loss_and_grad, ppo_surrogate_grad,
                       ppo_surrogate_loss, ppo_update, ppo_value_loss, toy_policy)

P0 = get_variant("P0")


def test_gae_single_terminal_step():
    adv, ret = compute_gae([1.0], [0.5], [1.0], [123.0], 0.99, 0.95)
    assert adv[0] == pytest.approx(0.5) and ret[0] == pytest.approx(1.0)


def test_gae_single_non_terminal_step():
    adv, _ = compute_gae([1.0], [0.5], [0.0], [0.8], 0.99, 0.95)
    assert adv[0] == pytest.approx(1.292)


def test_gae_lambda_zero_is_td_error(rng):
    r, v, d = rng.normal(size=(6, 3)), rng.normal(size=(6, 3)), (rng.random((6, 3)) < 0.3).astype(float)
    last = rng.normal(size=3)
    adv, _ = compute_gae(r, v, d, last, 0.9, 0.0)
    nxt = np.vstack([v[1:], last[None]])
    np.testing.assert_allclose(adv, r + 0.9 * nxt * (1 - d) - v, atol=1e-14)


def test_gae_matches_discounted_sum(rng):
    # lambda = 1 and no dones: advantage is the discounted return minus V
    r, v = rng.normal(size=5), rng.normal(size=5)
    last = 0.7
    adv, ret = compute_gae(r, v, np.zeros(5), last, 0.9, 1.0)
    for t in range(5):
        g = sum(0.9 ** (k - t) * r[k] for k in range(t, 5)) + 0.9 ** (5 - t) * last
        assert ret[t] == pytest.approx(g)
        assert adv[t] == pytest.approx(g - v[t])


def test_surrogate_examples():
    assert ppo_surrogate_loss([1.0], [1.0], 0.2) == pytest.approx(-1.0)
    assert ppo_surrogate_loss([1.5], [1.0], 0.2) == pytest.approx(-1.2)
    assert ppo_surrogate_loss([0.5], [-1.0], 0.2) == pytest.approx(0.8)


def test_surrogate_gradient_zero_when_clipped():
    ratio = np.array([1.3, 1.5, 0.7])
    adv = np.array([1.0, 2.0, -1.0])
    np.testing.assert_array_equal(ppo_surrogate_grad(ratio, adv, 0.2), 0.0)
    h = 1e-6
    for r, a in zip(ratio, adv):
        fd = (ppo_surrogate_loss([r + h], [a], 0.2) - ppo_surrogate_loss([r - h], [a], 0.2)) / (2 * h)
        assert fd == 0.0
    # inside the band the gradient is -A / n
    np.testing.assert_allclose(ppo_surrogate_grad([1.05, 0.9], [2.0, -1.0], 0.2), [-1.0, 0.5])


def test_value_loss_cases():
    assert ppo_value_loss([1.0], [1.0], [1.0], 0.2) == 0.0
    # V on target but far from V_old: the clipped branch dominates
    assert ppo_value_loss([2.0], [0.0], [2.0], 0.2) == pytest.approx(0.5 * 1.8 ** 2)
    assert ppo_value_loss([0.3], [5.0], [1.0], 1e9) == pytest.approx(0.5 * 0.7 ** 2)
    assert ppo_value_loss([0.3], [5.0], [1.0], None) == pytest.approx(0.5 * 0.7 ** 2)


def test_kl_adaptive_rule():
    assert kl_adaptive_lr(1e-3, 0.01) == 1e-3
    assert kl_adaptive_lr(1e-3, 0.05) == pytest.approx(1e-3 / 1.5)
    assert kl_adaptive_lr(1e-3, 0.001) == pytest.approx(1.5e-3)
    assert kl_adaptive_lr(1e-5, 1.0) == 1e-5
    assert kl_adaptive_lr(1e-2, 0.0) == 1e-2


def test_advantage_normalization(rng):
    a = normalize_advantages(rng.normal(3.0, 7.0, 1000))
    assert abs(a.mean()) < 1e-10 and abs(a.std() - 1.0) < 1e-6


def test_config_validation():
    with pytest.raises(ConfigError):
        PPOConfig(clip=1.5)
    with pytest.raises(ConfigError):
        PPOConfig.from_dict({"nope": 1})


def _toy(seed=0, n=8, horizon=3, steps=20):
    rng = np.random.default_rng(seed)
    env = ToyTrackingEnv(ToyConfig(num_envs=n, episode_steps=steps), np.random.default_rng(seed + 1))
    pol = toy_policy(np.random.default_rng(seed + 2))
    cfg = PPOConfig(horizon=horizon, num_envs=n, lr=3e-3, only_positive_rewards=False, reward_scale=1.0)
    return env, pol, cfg, rng


def test_rollout_shapes_and_determinism():
    def run():
        env, pol, cfg, rng = _toy(n=2, horizon=3)
        batch, _, _ = collect_rollout(pol, env, P0, cfg, rng)
        return batch

    a, b = run(), run()
    assert a.shape == (3, 2) and a.flat("obs").shape == (6, 2) and a.actions.shape == (3, 2, 1)
    for name in ("obs", "actions", "logp", "values", "rewards"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_done_at_first_step_zeroes_bootstrap():
    env, pol, cfg, rng = _toy(n=3, horizon=2, steps=1)
    cfg = replace(cfg, gamma=0.99)
    batch, infos, _ = collect_rollout(pol, env, P0, cfg, rng)
    assert np.all(batch.dones == 1.0)
    compute_batch_gae(batch, cfg.gamma, cfg.lam)
    # time-outs fold gamma * V into the reward, so the target is never bootstrapped again
    np.testing.assert_allclose(batch.returns, batch.rewards)


def test_single_transition_gradient_matches_finite_differences():
    env, pol, cfg, rng = _toy(n=1, horizon=1)
    cfg = replace(cfg, entropy_coef=0.05)
    batch, _, _ = collect_rollout(pol, env, P0, cfg, rng)
    compute_batch_gae(batch, cfg.gamma, cfg.lam)
    names = ("obs", "priv", "history", "morph_input", "actions", "logp", "mean", "values",
             "advantages", "returns")
    mb = {k: batch.flat(k) for k in names}
    mb["advantages"] = np.array([0.7])
    mb["logp"] = mb["logp"] - 0.05   # ratio ~1.05, inside the clip band
    mb["values"] = mb["values"] + 0.1
    store = pol.store

    def loss():
        res, _ = ppo_loss_and_grad(pol, P0, mb, cfg, batch.log_std)
        store.zero_grad()
        return res.loss

    def loss_and_grad():
        ppo_loss_and_grad(pol, P0, mb, cfg, batch.log_std)

    names = [n for n in store.names() if not n.startswith("morph")]
    assert finite_diff_check(store, loss, loss_and_grad, h=1e-5, names=names, floor=1e-6) < 1e-4


def test_zero_advantage_update_moves_only_log_std():
    env, pol, cfg, rng = _toy(n=4, horizon=4)
    cfg = replace(cfg, epochs=1, minibatches=1, schedule="fixed")
    batch, _, _ = collect_rollout(pol, env, P0, cfg, rng)
    batch.advantages = np.zeros_like(batch.rewards)
    batch.returns = batch.values.copy()
    before = {k: v.copy() for k, v in pol.store.params.items()}
    out = ppo_update(pol, P0, batch, cfg, np.random.default_rng(0))
    assert not out["aborted"]
    for k, v in pol.store.params.items():
        if k == "log_std":
            np.testing.assert_allclose(v - before[k], cfg.lr, rtol=1e-6)
        else:
            np.testing.assert_array_equal(v, before[k])


def test_non_finite_loss_aborts_and_restores():
    env, pol, cfg, rng = _toy()
    batch, _, _ = collect_rollout(pol, env, P0, cfg, rng)
    compute_batch_gae(batch, cfg.gamma, cfg.lam)
    batch.returns[0, 0] = np.nan
    before = {k: v.copy() for k, v in pol.store.params.items()}
    out = ppo_update(pol, P0, batch, replace(cfg, normalize_advantages=False), np.random.default_rng(0))
    assert out["aborted"] and "non-finite" in out["error"]
    for k, v in pol.store.params.items():
        np.testing.assert_array_equal(v, before[k])


def _train_toy(seed, iterations=20):
    env, pol, cfg, rng = _toy(seed, n=16, horizon=20)
    upd_rng = np.random.default_rng(seed + 10)
    lr = cfg.lr
    tracking, kls, losses = [], [], []
    for _ in range(iterations):
        batch, infos, _ = collect_rollout(pol, env, P0, cfg, rng)
        compute_batch_gae(batch, cfg.gamma, cfg.lam)
        out = ppo_update(pol, P0, batch, cfg, upd_rng, lr)
        lr = out["lr"]
        tracking.append(np.mean([i["tracking"] for i in infos]))
        kls.append(out["kl"])
        losses.append(out["loss"])
    return np.array(tracking), np.array(kls), losses


def test_toy_task_improves_and_stays_stable():
    tracking, kls, _ = _train_toy(0)
    assert tracking[-5:].mean() > tracking[:5].mean()
    assert np.all(kls < 10 * PPOConfig().desired_kl)


def test_toy_training_is_reproducible():
    a = _train_toy(3, iterations=4)[2]
    b = _train_toy(3, iterations=4)[2]
    assert a == b
