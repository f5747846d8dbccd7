"""Morphology-conditioned actor-critic with teacher/student extrinsics encoders.

Policy input layout (130 reals)::

    [ observation (48) | extrinsics latent (18) | morphology latent (64) ]

The extrinsics latent comes from the teacher encoder (privileged
observation) during training and from the student adaptation module
(observation/action history) at deployment.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffcore import MLP, ParamStore
from .errors import ConfigError, NumericalError
from .morphology import CONTROL_BLOCK, MORPH_BLOCK, MORPH_DIM, MorphologyEncoderParams

OBS_DIM = 48
PRIV_DIM = 18
EXTRINSICS_DIM = 18
LATENT_DIM = 64
ACTION_DIM = 12
HISTORY_LEN = 30
HISTORY_STEP = OBS_DIM + ACTION_DIM
HISTORY_DIM = HISTORY_LEN * HISTORY_STEP
POLICY_INPUT_DIM = OBS_DIM + EXTRINSICS_DIM + LATENT_DIM

LOG_2PI = math.log(2.0 * math.pi)
GAUSS_ENTROPY_CONST = 0.5 * math.log(2.0 * math.pi * math.e)

# Observation slices
OBS_LIN_VEL = slice(0, 3)
OBS_ANG_VEL = slice(3, 6)
OBS_GRAVITY = slice(6, 9)
OBS_COMMAND = slice(9, 12)
OBS_DOF_POS = slice(12, 24)
OBS_DOF_VEL = slice(24, 36)
OBS_LAST_ACTION = slice(36, 48)


@dataclass(frozen=True)
class Variant:
    """Which parts of the morphology vector the policy is conditioned on."""
    label: str
    inputs: str
    curriculum: str  # "hacl" or "fixed"
    morph_mask: tuple = field(default_factory=lambda: tuple([1.0] * MORPH_DIM))
    use_latent: bool = True
    shared_morphology: bool = False  # train on a single vector for every env


def _mask(indices):
    m = [0.0] * MORPH_DIM
    for i in indices:
        m[i] = 1.0
    return tuple(m)


VARIANTS = {
    "P0": Variant("P0", "state", "hacl", _mask(()), use_latent=False),
    "P1": Variant("P1", "state + ID (1 vec)", "fixed", _mask(range(MORPH_DIM)), shared_morphology=True),
    "P2": Variant("P2", "state + morph", "fixed", _mask(MORPH_BLOCK)),
    "P3": Variant("P3", "state + morph", "hacl", _mask(MORPH_BLOCK)),
    "P4": Variant("P4", "state + morph + ctrl", "hacl", _mask(range(MORPH_DIM))),
    "P5": Variant("P5", "state + ctrl", "hacl", _mask(CONTROL_BLOCK)),
}


def get_variant(label: str) -> Variant:
    try:
        return VARIANTS[label]
    except KeyError:
        raise ConfigError(f"unknown variant {label!r}; expected one of {sorted(VARIANTS)}") from None


@dataclass
class NetworkSizes:
    morph_hidden: int = 128
    latent: int = LATENT_DIM
    teacher_hidden: tuple = (256, 128)
    student_hidden: tuple = (256, 32)
    actor_hidden: tuple = (512, 256, 128)
    critic_hidden: tuple = (512, 256, 128)
    init_log_std: float = -0.7
    actor_output_scale: float = 1.0

    @classmethod
    def from_dict(cls, d: dict | None) -> "NetworkSizes":
        d = dict(d or {})
        for k in ("teacher_hidden", "student_hidden", "actor_hidden", "critic_hidden"):
            if k in d:
                d[k] = tuple(int(v) for v in d[k])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown network fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ActionDistribution:
    mean: np.ndarray
    log_std: np.ndarray

    @property
    def std(self):
        return np.exp(self.log_std)


class McarlPolicy:
    """All learnable parameters of the actor-critic.

    ``store`` holds encoder, teacher, actor, critic and the action log-std;
    the student adaptation module has its own ``student_store`` because it
    is optimised separately (regression onto teacher latents).
    """

    def __init__(self, sizes: NetworkSizes | None = None, rng: np.random.Generator | None = None,
                 obs_dim: int = OBS_DIM, priv_dim: int = PRIV_DIM, action_dim: int = ACTION_DIM,
                 history_dim: int = HISTORY_DIM):
        self.sizes = sizes = sizes or NetworkSizes()
        self.obs_dim, self.priv_dim, self.action_dim = obs_dim, priv_dim, action_dim
        self.latent_dim = sizes.latent
        self.input_dim = obs_dim + EXTRINSICS_DIM + sizes.latent
        self.store = ParamStore()
        self.student_store = ParamStore()
        self.morph_encoder = MLP(self.store, "morph", (MORPH_DIM, sizes.morph_hidden, sizes.latent), rng,
                                 output_activation=True)
        self.teacher = MLP(self.store, "teacher", (priv_dim, *sizes.teacher_hidden, EXTRINSICS_DIM), rng)
        self.actor = MLP(self.store, "actor", (self.input_dim, *sizes.actor_hidden, action_dim), rng,
                         output_scale=sizes.actor_output_scale)
        self.critic = MLP(self.store, "critic", (self.input_dim, *sizes.critic_hidden, 1), rng)
        self.store.add("log_std", np.full(action_dim, float(sizes.init_log_std)))
        self.student = MLP(self.student_store, "student", (history_dim, *sizes.student_hidden, EXTRINSICS_DIM), rng)

    @property
    def log_std(self):
        return self.store["log_std"]

    def encoder_params(self) -> MorphologyEncoderParams:
        l0, l1 = self.morph_encoder.layers
        return MorphologyEncoderParams(l0.W.copy(), l0.b.copy(), l1.W.copy(), l1.b.copy())

    def zero_(self):
        for s in (self.store, self.student_store):
            for p in s.params.values():
                p.fill(0.0)

    # ------------------------------------------------------------------
    def morph_latent(self, m_input, variant: Variant):
        """z_m for encoder inputs (already normalised and masked)."""
        m_input = np.atleast_2d(m_input)
        if not variant.use_latent:
            return np.zeros((m_input.shape[0], self.latent_dim))
        return self.morph_encoder(m_input)

    def act_inputs(self, obs, extrinsics, m_input, variant: Variant):
        z = self.morph_latent(m_input, variant)
        return assemble_policy_input(obs, extrinsics, z, latent_dim=self.latent_dim, obs_dim=self.obs_dim)


def masked_morph_input(m_normalized, variant: Variant):
    return np.asarray(m_normalized, dtype=np.float64) * np.asarray(variant.morph_mask)


def _check_len(name, arr, n):
    if arr.shape[-1] != n:
        raise ConfigError(f"{name} must have length {n}, got {arr.shape[-1]}")


def encode_extrinsics_teacher(policy: McarlPolicy, priv_obs):
    priv_obs = np.asarray(priv_obs, dtype=np.float64)
    _check_len("privileged observation", priv_obs, policy.priv_dim)
    return policy.teacher(priv_obs)


def encode_extrinsics_student(policy: McarlPolicy, history):
    history = np.asarray(history, dtype=np.float64)
    _check_len("history window", history, policy.student.in_dim)
    return policy.student(history)


def assemble_policy_input(obs, extrinsics, z_m, latent_dim: int = LATENT_DIM, obs_dim: int = OBS_DIM):
    obs = np.asarray(obs, dtype=np.float64)
    extrinsics = np.asarray(extrinsics, dtype=np.float64)
    z_m = np.asarray(z_m, dtype=np.float64)
    _check_len("observation", obs, obs_dim)
    _check_len("extrinsics", extrinsics, EXTRINSICS_DIM)
    _check_len("morphology latent", z_m, latent_dim)
    return np.concatenate([obs, extrinsics, z_m], axis=-1)


def actor_forward(policy: McarlPolicy, x) -> ActionDistribution:
    x = np.asarray(x, dtype=np.float64)
    _check_len("policy input", x, policy.input_dim)
    mean = policy.actor(x)
    if x.ndim == 1:
        mean = mean.reshape(-1)
    if not np.all(np.isfinite(mean)):
        raise NumericalError("actor produced non-finite action mean")
    return ActionDistribution(mean, np.broadcast_to(policy.log_std, mean.shape).copy())


def critic_forward(policy: McarlPolicy, x):
    x = np.asarray(x, dtype=np.float64)
    _check_len("policy input", x, policy.input_dim)
    v = policy.critic(x)[..., 0]
    if not np.all(np.isfinite(v)):
        raise NumericalError("critic produced non-finite value")
    return float(v) if np.ndim(v) == 0 else v


def gaussian_logprob_entropy(dist: ActionDistribution, a):
    """Diagonal-Gaussian log density at ``a`` and the distribution entropy."""
    a = np.asarray(a, dtype=np.float64)
    z = (a - dist.mean) * np.exp(-dist.log_std)
    logp = np.sum(-0.5 * z * z - dist.log_std - 0.5 * LOG_2PI, axis=-1)
    ent = np.sum(GAUSS_ENTROPY_CONST + dist.log_std, axis=-1)
    return logp, ent


def deterministic_action(dist: ActionDistribution):
    return dist.mean


def sample_action(dist: ActionDistribution, rng: np.random.Generator):
    return dist.mean + dist.std * rng.standard_normal(dist.mean.shape)
