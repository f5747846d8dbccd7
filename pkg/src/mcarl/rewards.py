"""Velocity-tracking reward terms.

Every term is computed unweighted (``terms``); the breakdown total is the
weighted sum. Penalty weights are negative so the raw penalty terms stay
non-negative.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ConfigError

TERM_NAMES = (
    "tracking_lin_vel",
    "tracking_ang_vel",
    "feet_air_time",
    "energy",
    "energy_efficiency",
    "lin_vel_z",
    "ang_vel_xy",
    "orientation",
    "base_height",
    "torques",
    "dof_vel",
    "dof_acc",
    "action_rate",
    "collision",
    "termination",
    "survival",
    "dof_pos_limits",
    "dof_vel_limits",
    "torque_limits",
    "stand_still",
    "stumble",
    "feet_contact_forces",
)
TASK_TERMS = ("tracking_lin_vel", "tracking_ang_vel")
PENALTY_TERMS = TERM_NAMES[5:]

ENERGY_EPS = 1e-6


@dataclass
class RewardWeights:
    tracking_lin_vel: float = 3.0
    tracking_ang_vel: float = 3.0
    feet_air_time: float = 1.0
    energy: float = -1e-4
    energy_efficiency: float = 1e-7
    lin_vel_z: float = -2.0
    ang_vel_xy: float = -0.05
    orientation: float = -5.0
    base_height: float = -1.0
    torques: float = -1e-4
    dof_vel: float = -1e-4
    dof_acc: float = -2.5e-7
    action_rate: float = -0.2
    collision: float = -1.0
    termination: float = -1.0
    survival: float = 0.0
    dof_pos_limits: float = -10.0
    dof_vel_limits: float = -10.0
    torque_limits: float = -10.0
    stand_still: float = -0.5
    stumble: float = -0.5
    feet_contact_forces: float = -0.01
    tracking_sigma: float = 0.25

    def __post_init__(self):
        if self.tracking_sigma <= 0:
            raise ConfigError("tracking_sigma must be positive")
        if self.tracking_lin_vel <= 0 or self.tracking_ang_vel <= 0:
            raise ConfigError("task reward weights must be positive")

    def weight(self, name: str) -> float:
        return getattr(self, name)

    @classmethod
    def from_dict(cls, d: dict | None) -> "RewardWeights":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown reward weights: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RewardBreakdown:
    terms: dict
    weights: RewardWeights

    @property
    def weighted(self) -> dict:
        return {k: self.weights.weight(k) * v for k, v in self.terms.items()}

    @property
    def total(self):
        return sum(self.weighted.values())

    @property
    def tracking(self):
        w = self.weighted
        return w["tracking_lin_vel"] + w["tracking_ang_vel"]


def tracking_reward(v, v_cmd, sigma: float, w: float):
    """``w * exp(-||v - v_cmd||^2 / sigma)``; last axis is the vector axis for arrays."""
    diff = np.asarray(v, dtype=np.float64) - np.asarray(v_cmd, dtype=np.float64)
    sq = diff * diff if diff.ndim == 0 else np.sum(diff * diff, axis=-1)
    return w * np.exp(-sq / sigma)


@dataclass
class RewardInputs:
    """Per-step quantities the reward needs, all batched over envs (leading axis N).

    Planar velocities are in the heading frame.
    """
    lin_vel: np.ndarray        # (N, 3)
    ang_vel: np.ndarray        # (N, 3) roll rate, pitch rate, yaw rate
    projected_gravity: np.ndarray  # (N, 3)
    height: np.ndarray         # (N,)
    q: np.ndarray              # (N, 12)
    qd: np.ndarray             # (N, 12)
    qd_prev: np.ndarray        # (N, 12)
    tau: np.ndarray            # (N, 12) applied torques
    action: np.ndarray         # (N, 12)
    prev_action: np.ndarray    # (N, 12)
    command: np.ndarray        # (N, 3)
    first_contact: np.ndarray  # (N, 4) bool: touchdown this step
    air_time: np.ndarray       # (N, 4) swing duration so far (s)
    foot_force: np.ndarray     # (N, 4, 3)
    body_contacts: np.ndarray  # (N,) number of non-foot contacts with ||F|| > 0.1
    reset: np.ndarray          # (N,) bool
    timeout: np.ndarray        # (N,) bool
    q_default: np.ndarray      # (12,)
    q_min: np.ndarray          # (12,) soft limits
    q_max: np.ndarray
    qd_max: float
    tau_max: np.ndarray        # (N, 12) soft limits
    h_target: float
    dt: float
    force_max: float


def compute_terms(x: RewardInputs, sigma: float) -> dict:
    v_xy = x.lin_vel[:, :2]
    cmd_xy = x.command[:, :2]
    power = np.sum(x.tau * x.qd, axis=1)
    speed_xy = np.linalg.norm(v_xy, axis=1)
    f_xy = np.linalg.norm(x.foot_force[..., :2], axis=-1)
    f_z = np.abs(x.foot_force[..., 2])
    f_norm = np.linalg.norm(x.foot_force, axis=-1)
    standing = (np.linalg.norm(x.command, axis=1) < 0.1).astype(np.float64)
    failed = (x.reset & ~x.timeout).astype(np.float64)
    return {
        "tracking_lin_vel": tracking_reward(v_xy, cmd_xy, sigma, 1.0),
        "tracking_ang_vel": tracking_reward(x.ang_vel[:, 2:3], x.command[:, 2:3], sigma, 1.0),
        "feet_air_time": np.sum((x.air_time - 0.5) * x.first_contact, axis=1),
        "energy": power,
        "energy_efficiency": -np.abs(power / (speed_xy * x.dt + ENERGY_EPS)),
        "lin_vel_z": x.lin_vel[:, 2] ** 2,
        "ang_vel_xy": np.sum(x.ang_vel[:, :2] ** 2, axis=1),
        "orientation": np.sum(x.projected_gravity[:, :2] ** 2, axis=1),
        "base_height": 2.0 * (x.height - x.h_target) ** 2,
        "torques": np.sum(x.tau ** 2, axis=1),
        "dof_vel": np.sum(x.qd ** 2, axis=1),
        "dof_acc": np.sum(((x.qd - x.qd_prev) / x.dt) ** 2, axis=1),
        "action_rate": np.sum((x.action - x.prev_action) ** 2, axis=1),
        "collision": np.asarray(x.body_contacts, dtype=np.float64),
        "termination": failed,
        "survival": 1.0 - failed,
        "dof_pos_limits": np.sum(np.maximum(0.0, np.maximum(x.q_min - x.q, x.q - x.q_max)), axis=1),
        "dof_vel_limits": np.sum(np.clip(np.abs(x.qd) - x.qd_max, 0.0, 1.0), axis=1),
        "torque_limits": np.sum(np.maximum(0.0, np.abs(x.tau) - x.tau_max), axis=1),
        "stand_still": np.sum(np.abs(x.q - x.q_default), axis=1) * standing,
        "stumble": np.any(f_xy > 5.0 * f_z, axis=1).astype(np.float64),
        "feet_contact_forces": np.sum(np.maximum(0.0, f_norm - x.force_max), axis=1),
    }


def compute_rewards(x: RewardInputs, weights: RewardWeights) -> RewardBreakdown:
    terms = compute_terms(x, weights.tracking_sigma)
    return RewardBreakdown(terms, weights)
