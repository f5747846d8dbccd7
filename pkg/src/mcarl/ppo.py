"""PPO for the morphology-conditioned actor-critic.

One iteration = ``collect_rollout`` (H steps on N envs with teacher
extrinsics) -> ``compute_gae`` -> ``ppo_update`` (epochs x minibatches of
clipped surrogate + clipped value loss - entropy bonus, with the student
adaptation module regressed onto teacher latents in the same pass).
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .diffcore import adam_step
from .errors import ConfigError, NumericalError
from .morphology import MORPH_DIM, MorphologyRange
from .policy import (
    EXTRINSICS_DIM,
    ActionDistribution,
    McarlPolicy,
    Variant,
    assemble_policy_input,
    gaussian_logprob_entropy,
    masked_morph_input,
)

log = logging.getLogger(__name__)


@dataclass
class PPOConfig:
    clip: float = 0.2
    value_coef: float = 1.0
    entropy_coef: float = 0.01
    lr: float = 1e-3
    epochs: int = 5
    minibatches: int = 4
    gamma: float = 0.99
    lam: float = 0.95
    desired_kl: float = 0.01
    max_grad_norm: float = 1.0
    total_timesteps: int = 2_000_000
    num_envs: int = 64
    horizon: int = 24
    schedule: str = "adaptive"        # or "fixed"
    clipped_value_loss: bool = True
    normalize_advantages: bool = True
    student_lr: float = 1e-3
    reward_scale: float | None = None  # None: multiply step rewards by the env dt
    only_positive_rewards: bool = True
    lr_min: float = 1e-5
    lr_max: float = 1e-2

    def __post_init__(self):
        if not 0.0 < self.clip < 1.0:
            raise ConfigError("ppo.clip must lie in (0, 1)")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("ppo.gamma must lie in (0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("ppo.lam must lie in [0, 1]")
        if self.epochs < 1 or self.minibatches < 1 or self.horizon < 1 or self.num_envs < 1:
            raise ConfigError("ppo epochs, minibatches, horizon and num_envs must be >= 1")
        if self.lr <= 0 or self.student_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.schedule not in ("adaptive", "fixed"):
            raise ConfigError("ppo.schedule must be 'adaptive' or 'fixed'")

    @property
    def iterations(self) -> int:
        return max(1, self.total_timesteps // (self.num_envs * self.horizon))

    @classmethod
    def from_dict(cls, d: dict | None) -> "PPOConfig":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown ppo fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass
class TransitionBatch:
    """Rollout storage; every array has leading axes (H, N)."""
    obs: np.ndarray
    priv: np.ndarray
    history: np.ndarray
    morph: np.ndarray        # raw morphology vectors
    morph_input: np.ndarray  # normalised and masked encoder inputs
    actions: np.ndarray
    logp: np.ndarray
    mean: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    commands: np.ndarray
    last_values: np.ndarray  # (N,)
    log_std: np.ndarray      # (A,) behaviour log-std
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    @property
    def shape(self):
        return self.rewards.shape

    def flat(self, name):
        a = getattr(self, name)
        return a.reshape((-1,) + a.shape[2:])


# ---------------------------------------------------------------------------
# Rollout

def policy_step(policy: McarlPolicy, variant: Variant, obs, priv, m_input):
    """Teacher-path forward: (policy input x, action distribution, value)."""
    e = policy.teacher(priv)
    z = policy.morph_latent(m_input, variant)
    x = assemble_policy_input(obs, e, z, latent_dim=policy.latent_dim, obs_dim=policy.obs_dim)
    mean = policy.actor(x)
    value = policy.critic(x)[..., 0]
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(value))):
        raise NumericalError("policy produced non-finite outputs during rollout")
    return x, ActionDistribution(mean, np.broadcast_to(policy.log_std, mean.shape).copy()), value


def morph_inputs(venv, morph_range: MorphologyRange | None, variant: Variant):
    m = venv.morph
    if morph_range is None:
        return masked_morph_input(np.zeros_like(m), variant)
    return masked_morph_input(morph_range.normalize(m), variant)


def collect_rollout(policy: McarlPolicy, venv, variant: Variant, cfg: PPOConfig,
                    rng: np.random.Generator, morph_range: MorphologyRange | None = None):
    """Run ``cfg.horizon`` steps; returns (batch, completed-episode infos, step stats)."""
    H, N = cfg.horizon, venv.num_envs
    A = policy.action_dim
    scale = venv.cfg.dt if cfg.reward_scale is None else cfg.reward_scale
    obs0, priv0, hist0 = venv.observations()
    buf = {
        "obs": np.zeros((H, N, obs0.shape[1])), "priv": np.zeros((H, N, priv0.shape[1])),
        "history": np.zeros((H, N, hist0.shape[1])), "morph": np.zeros((H, N, MORPH_DIM)),
        "morph_input": np.zeros((H, N, MORPH_DIM)), "actions": np.zeros((H, N, A)),
        "logp": np.zeros((H, N)), "mean": np.zeros((H, N, A)), "values": np.zeros((H, N)),
        "rewards": np.zeros((H, N)), "dones": np.zeros((H, N)), "commands": np.zeros((H, N, 3)),
    }
    infos = []
    tracking_sum = 0.0
    reward_sum = 0.0
    for t in range(H):
        obs, priv, hist = obs0, priv0, hist0
        bad = ~(np.all(np.isfinite(obs), axis=1) & np.all(np.isfinite(priv), axis=1))
        if np.any(bad):
            idx = np.flatnonzero(bad)
            log.warning("non-finite observation in envs %s; resetting", idx.tolist())
            venv.reset_idx(idx)
            obs, priv, hist = venv.observations()
        m_in = morph_inputs(venv, morph_range, variant)
        _, dist, value = policy_step(policy, variant, obs, priv, m_in)
        action = dist.mean + dist.std * rng.standard_normal(dist.mean.shape)
        logp, _ = gaussian_logprob_entropy(dist, action)
        buf["obs"][t], buf["priv"][t], buf["history"][t] = obs, priv, hist
        buf["morph"][t], buf["morph_input"][t] = venv.morph, m_in
        buf["actions"][t], buf["logp"][t], buf["mean"][t], buf["values"][t] = action, logp, dist.mean, value
        buf["commands"][t] = venv.cmd
        total, done, timeout, rb, ep_infos = venv.step(action, obs)
        r = np.asarray(total, dtype=np.float64) * scale
        if cfg.only_positive_rewards:
            r = np.maximum(r, 0.0)
        # time-outs are not terminal for the value target
        r = r + cfg.gamma * value * np.asarray(timeout, dtype=np.float64)
        buf["rewards"][t] = r
        buf["dones"][t] = np.asarray(done, dtype=np.float64)
        tracking_sum += float(np.mean(rb.tracking))
        reward_sum += float(np.mean(total))
        infos.extend(ep_infos)
        obs0, priv0, hist0 = venv.observations()
    m_in = morph_inputs(venv, morph_range, variant)
    _, _, last_values = policy_step(policy, variant, obs0, priv0, m_in)
    batch = TransitionBatch(last_values=last_values, log_std=policy.log_std.copy(), **buf)
    stats = {"step_tracking": tracking_sum / H, "step_reward": reward_sum / H}
    return batch, infos, stats


# ---------------------------------------------------------------------------
# Advantage estimation and losses

def compute_gae(rewards, values, dones, last_values, gamma: float, lam: float):
    """Generalised advantage estimates and returns, both shaped like ``rewards``."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    squeeze = rewards.ndim == 1
    if squeeze:
        rewards, values, dones = rewards[:, None], values[:, None], dones[:, None]
    last_values = np.asarray(last_values, dtype=np.float64).reshape(rewards.shape[1])
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    next_adv = np.zeros(rewards.shape[1])
    for t in reversed(range(T)):
        next_v = last_values if t == T - 1 else values[t + 1]
        notdone = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_v * notdone - values[t]
        next_adv = delta + gamma * lam * notdone * next_adv
        adv[t] = next_adv
    ret = adv + values
    if squeeze:
        return adv[:, 0], ret[:, 0]
    return adv, ret


def compute_batch_gae(batch: TransitionBatch, gamma: float, lam: float):
    batch.advantages, batch.returns = compute_gae(batch.rewards, batch.values, batch.dones,
                                                  batch.last_values, gamma, lam)
    return batch


def normalize_advantages(adv):
    adv = np.asarray(adv, dtype=np.float64)
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def ppo_surrogate_loss(ratio, adv, eps: float) -> float:
    ratio = np.asarray(ratio, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    return float(-np.mean(np.minimum(ratio * adv, np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)))


def ppo_surrogate_grad(ratio, adv, eps: float):
    """d(surrogate loss)/d(ratio) per sample (already divided by the batch size)."""
    ratio = np.asarray(ratio, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    unclipped = ratio * adv <= np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    return np.where(unclipped, -adv, 0.0) / ratio.size


def ppo_value_loss(v, v_old, ret, eps: float | None) -> float:
    v, v_old, ret = (np.asarray(a, dtype=np.float64) for a in (v, v_old, ret))
    if eps is None:
        return float(np.mean(0.5 * (v - ret) ** 2))
    v_clip = v_old + np.clip(v - v_old, -eps, eps)
    return float(np.mean(0.5 * np.maximum((v - ret) ** 2, (v_clip - ret) ** 2)))


def ppo_value_grad(v, v_old, ret, eps: float | None):
    v, v_old, ret = (np.asarray(a, dtype=np.float64) for a in (v, v_old, ret))
    u = v - ret
    if eps is None:
        return u / v.size
    d = v - v_old
    w = v_old + np.clip(d, -eps, eps) - ret
    inside = np.abs(d) < eps
    g = np.where(u * u >= w * w, u, np.where(inside, w, 0.0))
    return g / v.size


def gaussian_kl(mean_old, log_std_old, mean_new, log_std_new):
    """Mean KL(old || new) between diagonal Gaussians over the batch."""
    var_old = np.exp(2.0 * log_std_old)
    var_new = np.exp(2.0 * log_std_new)
    kl = (log_std_new - log_std_old) + (var_old + (mean_old - mean_new) ** 2) / (2.0 * var_new) - 0.5
    return float(np.mean(np.sum(kl, axis=-1)))


def kl_adaptive_lr(lr: float, kl: float, desired_kl: float = 0.01,
                   lr_min: float = 1e-5, lr_max: float = 1e-2) -> float:
    if kl > 2.0 * desired_kl:
        lr = lr / 1.5
    elif kl < desired_kl / 2.0:
        lr = lr * 1.5
    return float(min(max(lr, lr_min), lr_max))


# ---------------------------------------------------------------------------
# Update

@dataclass
class MinibatchResult:
    loss: float
    surrogate: float
    value: float
    entropy: float
    kl: float


def ppo_loss_and_grad(policy: McarlPolicy, variant: Variant, mb: dict, cfg: PPOConfig,
                      behaviour_log_std):
    """Total PPO loss on one minibatch; accumulates gradients into ``policy.store``.

    Returns the loss parts plus the teacher latents (for student regression).
    """
    use_latent = variant.use_latent
    e = policy.teacher.forward(mb["priv"])
    if use_latent:
        z = policy.morph_encoder.forward(mb["morph_input"])
    else:
        z = np.zeros((len(e), policy.latent_dim))
    x = np.concatenate([mb["obs"], e, z], axis=1)
    mean = policy.actor.forward(x)
    v = policy.critic.forward(x)[:, 0]
    log_std = policy.log_std
    dist = ActionDistribution(mean, np.broadcast_to(log_std, mean.shape))
    logp, ent = gaussian_logprob_entropy(dist, mb["actions"])
    ratio = np.exp(logp - mb["logp"])
    adv = mb["advantages"]
    l_clip = ppo_surrogate_loss(ratio, adv, cfg.clip)
    eps_v = cfg.clip if cfg.clipped_value_loss else None
    l_v = ppo_value_loss(v, mb["values"], mb["returns"], eps_v)
    entropy = float(np.mean(ent))
    loss = l_clip + cfg.value_coef * l_v - cfg.entropy_coef * entropy
    kl = gaussian_kl(mb["mean"], behaviour_log_std, mean, log_std)
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite PPO loss {loss}")

    # d loss / d logp
    dlogp = ppo_surrogate_grad(ratio, adv, cfg.clip) * ratio
    inv_var = np.exp(-2.0 * log_std)
    diff = mb["actions"] - mean
    dmean = dlogp[:, None] * diff * inv_var
    dlog_std = np.sum(dlogp[:, None] * (diff * diff * inv_var - 1.0), axis=0)
    dlog_std -= cfg.entropy_coef * np.ones_like(log_std)   # entropy = sum(log_std) + const
    policy.store.grads["log_std"] += dlog_std
    dv = cfg.value_coef * ppo_value_grad(v, mb["values"], mb["returns"], eps_v)
    dx = policy.actor.backward(dmean) + policy.critic.backward(dv[:, None])
    od = policy.obs_dim
    policy.teacher.backward(dx[:, od:od + EXTRINSICS_DIM], need_input_grad=False)
    if use_latent:
        policy.morph_encoder.backward(dx[:, od + EXTRINSICS_DIM:], need_input_grad=False)
    return MinibatchResult(loss, l_clip, l_v, entropy, kl), e


def student_loss_and_grad(policy: McarlPolicy, history, target):
    """MSE of the student latent against (detached) teacher latents; accumulates grads."""
    out = policy.student.forward(history)
    err = out - target
    loss = float(np.mean(err * err))
    policy.student.backward(2.0 * err / err.size, need_input_grad=False)
    return loss


def _snapshot(store):
    return ({k: v.copy() for k, v in store.params.items()}, {k: v.copy() for k, v in store.m.items()},
            {k: v.copy() for k, v in store.v.items()}, store.step)


def _restore(store, snap):
    params, m, v, step = snap
    for k in params:
        store.params[k][...] = params[k]
        store.m[k][...] = m[k]
        store.v[k][...] = v[k]
    store.step = step
    store.zero_grad()


def ppo_update(policy: McarlPolicy, variant: Variant, batch: TransitionBatch, cfg: PPOConfig,
               rng: np.random.Generator, lr: float | None = None) -> dict:
    """Epochs x minibatches of PPO + student regression. Returns stats incl. the new lr."""
    lr = cfg.lr if lr is None else lr
    if batch.advantages is None:
        compute_batch_gae(batch, cfg.gamma, cfg.lam)
    names = ("obs", "priv", "history", "morph_input", "actions", "logp", "mean", "values",
             "advantages", "returns")
    data = {k: batch.flat(k) for k in names}
    if cfg.normalize_advantages:
        data["advantages"] = normalize_advantages(data["advantages"])
    total = data["obs"].shape[0]
    mb_size = max(1, total // cfg.minibatches)
    snaps = (_snapshot(policy.store), _snapshot(policy.student_store))
    results, student_losses = [], []
    try:
        for _ in range(cfg.epochs):
            perm = rng.permutation(total)
            for k in range(cfg.minibatches):
                idx = perm[k * mb_size:(k + 1) * mb_size] if k < cfg.minibatches - 1 else perm[k * mb_size:]
                if idx.size == 0:
                    continue
                mb = {n: data[n][idx] for n in names}
                policy.store.zero_grad()
                res, e = ppo_loss_and_grad(policy, variant, mb, cfg, batch.log_std)
                if cfg.schedule == "adaptive":
                    lr = kl_adaptive_lr(lr, res.kl, cfg.desired_kl, cfg.lr_min, cfg.lr_max)
                adam_step(policy.store, lr, cfg.max_grad_norm)
                policy.student_store.zero_grad()
                student_losses.append(student_loss_and_grad(policy, mb["history"], e))
                adam_step(policy.student_store, cfg.student_lr, cfg.max_grad_norm)
                results.append(res)
    except NumericalError as exc:
        log.error("PPO update aborted, parameters restored: %s", exc)
        _restore(policy.store, snaps[0])
        _restore(policy.student_store, snaps[1])
        return {"aborted": True, "lr": lr, "error": str(exc)}
    mean = lambda f: float(np.mean([getattr(r, f) for r in results]))
    return {
        "aborted": False, "lr": lr, "loss": mean("loss"), "surrogate_loss": mean("surrogate"),
        "value_loss": mean("value"), "entropy": mean("entropy"), "kl": mean("kl"),
        "student_loss": float(np.mean(student_losses)),
    }


# ---------------------------------------------------------------------------
# A one-dimensional tracking task, used to check the optimiser end to end

@dataclass
class ToyConfig:
    dt: float = 1.0
    episode_steps: int = 20
    num_envs: int = 16
    sigma: float = 0.25


class _ToyBreakdown:
    def __init__(self, tracking):
        self.tracking = tracking
        self.total = tracking


class ToyTrackingEnv:
    """Observation = [command, velocity]; action sets the velocity; reward tracks the command."""

    obs_dim = 2
    priv_dim = 1
    action_dim = 1
    history_dim = 3

    def __init__(self, cfg: ToyConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.num_envs = cfg.num_envs
        self.morph = np.zeros((cfg.num_envs, MORPH_DIM))
        self.step_count = np.zeros(cfg.num_envs, dtype=np.int64)
        self.cmd = np.zeros((cfg.num_envs, 3))
        self.vel = np.zeros(cfg.num_envs)
        self.prev_action = np.zeros((cfg.num_envs, 1))
        self.ep_track = np.zeros(cfg.num_envs)
        self.reset_idx(np.arange(cfg.num_envs))

    def reset_idx(self, idx):
        idx = np.asarray(idx)
        self.cmd[idx, 0] = self.rng.uniform(-1.0, 1.0, idx.size)
        self.vel[idx] = 0.0
        self.step_count[idx] = 0
        self.ep_track[idx] = 0.0

    def observations(self):
        obs = np.stack([self.cmd[:, 0], self.vel], axis=1)
        priv = np.zeros((self.num_envs, 1))
        hist = np.concatenate([obs, self.prev_action], axis=1)
        return obs, priv, hist

    def step(self, action, obs=None):
        a = np.asarray(action, dtype=np.float64)[:, 0]
        self.vel = a
        self.prev_action = a[:, None].copy()
        r = np.exp(-(a - self.cmd[:, 0]) ** 2 / self.cfg.sigma)
        self.step_count += 1
        self.ep_track += r
        timeout = self.step_count >= self.cfg.episode_steps
        infos = [{"env": int(i), "tracking": float(self.ep_track[i] / self.cfg.episode_steps)}
                 for i in np.flatnonzero(timeout)]
        self.reset_idx(np.flatnonzero(timeout))
        return r, timeout.copy(), timeout.copy(), _ToyBreakdown(r), infos


def toy_policy(rng: np.random.Generator, hidden=(32, 32)):
    from .policy import NetworkSizes
    sizes = NetworkSizes(morph_hidden=8, latent=4, teacher_hidden=(8,), student_hidden=(8,),
                         actor_hidden=hidden, critic_hidden=hidden)
    return McarlPolicy(sizes, rng, obs_dim=ToyTrackingEnv.obs_dim, priv_dim=ToyTrackingEnv.priv_dim,
                       action_dim=ToyTrackingEnv.action_dim, history_dim=ToyTrackingEnv.history_dim)
