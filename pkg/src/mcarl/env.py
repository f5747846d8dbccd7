"""Morphology-parameterised quadruped surrogate.

This is a reduced model, not a rigid-body simulator. Joints follow PD
dynamics with torque limits; the base is a planar body pushed by the
backward sweep of stance legs and slowed by linear drag. Roll, pitch and
height are second-order springs whose references depend on stance-leg
posture and on torque saturation. Every entry of the morphology vector
reaches the dynamics:

* masses and lengths set the total mass, leg length and joint inertias;
* stiffness, damping, motor strength, torque limits and action scale shape
  the torque path.

Stance is scheduled by a trot clock. Stance legs carry the body weight,
which deflects their knees; that deflection is what lets a policy without
clock inputs find out which legs are on the ground.

All functions operate on batches: arrays carry a leading env axis ``N``.
Leg order is FR, FL, RR, RL; joint order within a leg is hip, thigh, calf.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ConfigError, NumericalError
from .morphology import INDEX, MORPH_DIM
from .policy import ACTION_DIM, OBS_DIM, PRIV_DIM
from .rewards import RewardBreakdown, RewardInputs, RewardWeights, compute_rewards

log = logging.getLogger(__name__)

N_LEGS = 4
HIP = np.array([0, 3, 6, 9])
THIGH = HIP + 1
CALF = HIP + 2
SIDE = np.array([1.0, -1.0, 1.0, -1.0])   # +1 right legs
FRONT = np.array([1.0, 1.0, -1.0, -1.0])  # +1 front legs


@dataclass
class EnvConfig:
    dt: float = 0.005
    episode_steps: int = 400
    num_envs: int = 64
    gravity: float = 9.81
    friction: float = 1.0
    gait_frequency: float = 2.5
    phase_offsets: tuple = (0.0, math.pi, math.pi, 0.0)
    drag: float = 2.0            # c_d, 1/s
    thrust: float = 24.0         # c_th, N s / (m rad)
    lateral_thrust: float = 24.0
    yaw_thrust: float = 0.6      # 1/m
    thrust_rate_gain: float = 0.02  # s/rad: faster leg sweeps push harder
    yaw_drag: float = 2.0
    h_target: float = 0.30
    armature: float = 0.01       # reflected rotor inertia, kg m^2
    hip_scale: float = 0.4
    default_pose: tuple = (0.0, 0.8, -1.5)
    joint_lower: tuple = (-1.2, -1.047, -2.7)
    joint_upper: tuple = (1.2, 2.6, -0.916)
    soft_limit: float = 0.9
    dof_vel_max: float = 30.0
    joint_noise: float = 0.05
    action_clip: float = 10.0
    load_gain: float = 0.5       # knee load lever as a fraction of leg length
    posture_gain: float = 6.0    # roll/pitch reference per metre of stance-leg extension / half-track
    half_track: float = 0.1
    saturation_gain: float = 0.02  # rad of tilt per Nm of saturation excess
    sag_gain: float = 0.002      # m of height sag per Nm of saturation excess
    attitude_freq: float = 20.0  # rad/s, critically damped
    height_freq: float = 20.0
    fail_height_frac: float = 0.5
    fail_tilt: float = 0.35
    collision_height_frac: float = 0.6
    contact_force_max: float = 100.0
    push_enabled: bool = False
    push_interval_s: float = 2.0
    push_velocity: float = 0.3
    randomize_privileged: bool = False
    friction_range: tuple = (0.5, 1.25)
    payload_range: tuple = (-0.5, 1.0)
    motor_noise: float = 0.05
    failure_enabled: bool = True
    obs_scales: dict = field(default_factory=lambda: {
        "lin_vel": 2.0, "ang_vel": 0.25, "dof_pos": 1.0, "dof_vel": 0.05})

    def __post_init__(self):
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        if self.episode_steps < 1:
            raise ConfigError("episode_steps must be >= 1")
        if self.num_envs < 1:
            raise ConfigError("num_envs must be >= 1")
        if len(self.phase_offsets) != N_LEGS:
            raise ConfigError("phase_offsets needs one entry per leg")

    @property
    def q_default(self):
        return np.tile(np.asarray(self.default_pose, dtype=np.float64), N_LEGS)

    @property
    def q_lower(self):
        return np.tile(np.asarray(self.joint_lower, dtype=np.float64), N_LEGS)

    @property
    def q_upper(self):
        return np.tile(np.asarray(self.joint_upper, dtype=np.float64), N_LEGS)

    def soft_limits(self):
        mid = 0.5 * (self.q_lower + self.q_upper)
        half = 0.5 * (self.q_upper - self.q_lower) * self.soft_limit
        return mid - half, mid + half

    @property
    def push_interval_steps(self):
        return max(1, int(round(self.push_interval_s / self.dt)))

    @classmethod
    def from_dict(cls, d: dict | None) -> "EnvConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown env fields: {sorted(unknown)}")
        for k in ("phase_offsets", "default_pose", "joint_lower", "joint_upper",
                  "friction_range", "payload_range"):
            if k in d:
                d[k] = tuple(float(v) for v in d[k])
        return cls(**d)


@dataclass
class Body:
    """Constants derived from a morphology vector (plus privileged factors)."""
    mass: np.ndarray         # (N,) total mass
    leg_length: np.ndarray   # (N,)
    inertia: np.ndarray      # (N, 12)
    tau_max: np.ndarray      # (N, 12)
    kp: np.ndarray           # (N,)
    kd: np.ndarray           # (N,)
    strength: np.ndarray     # (N, 12) motor strength realisation
    action_scale: np.ndarray  # (N, 12) includes hip scale on hip channels
    friction: np.ndarray     # (N,)
    payload: np.ndarray      # (N,)


def derive_body(cfg: EnvConfig, m, friction=None, payload=None, motor_factor=None) -> Body:
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    n = m.shape[0]
    col = lambda name: m[:, INDEX[name]]
    friction = np.full(n, cfg.friction) if friction is None else np.asarray(friction, dtype=np.float64)
    payload = np.zeros(n) if payload is None else np.asarray(payload, dtype=np.float64)
    motor_factor = np.ones((n, ACTION_DIM)) if motor_factor is None else np.asarray(motor_factor, dtype=np.float64)
    leg_mass = col("hip_mass") + col("thigh_mass") + col("calf_mass") + col("foot_mass")
    mass = col("base_mass") + payload + N_LEGS * leg_mass
    leg_length = col("thigh_to_calf_length") + col("calf_to_foot_length")
    link = np.stack([
        col("hip_mass") * (0.5 * col("hip_to_thigh_length")) ** 2,
        col("thigh_mass") * (0.5 * col("thigh_to_calf_length")) ** 2,
        (col("calf_mass") + col("foot_mass")) * (0.5 * col("calf_to_foot_length")) ** 2,
    ], axis=1)
    inertia = np.tile(link, (1, N_LEGS)) + cfg.armature
    tau_leg = np.stack([col("hip_torque_limit"), col("hip_torque_limit"), col("calf_torque_limit")], axis=1)
    tau_max = np.tile(tau_leg, (1, N_LEGS))
    scale = np.tile(np.array([cfg.hip_scale, 1.0, 1.0]), N_LEGS)
    action_scale = col("action_scale")[:, None] * scale[None, :]
    strength = col("motor_strength")[:, None] * motor_factor
    return Body(mass, leg_length, inertia, tau_max, col("joint_stiffness"), col("joint_damping"),
                strength, action_scale, friction, payload)


@dataclass
class RobotState:
    pos: np.ndarray          # (N, 3) world position; z is base height
    vel: np.ndarray          # (N, 3) heading-frame linear velocity (vx, vy, vz)
    yaw: np.ndarray          # (N,)
    yaw_rate: np.ndarray     # (N,)
    attitude: np.ndarray     # (N, 2) roll, pitch proxy
    attitude_rate: np.ndarray  # (N, 2)
    q: np.ndarray            # (N, 12)
    qd: np.ndarray           # (N, 12)
    tau: np.ndarray          # (N, 12) applied
    tau_request: np.ndarray  # (N, 12) before clamping
    contact: np.ndarray      # (N, 4) bool
    air_time: np.ndarray     # (N, 4)
    foot_force: np.ndarray   # (N, 4, 3)
    phase: np.ndarray        # (N,)
    step: np.ndarray         # (N,) int
    push_vel: np.ndarray     # (N, 2) last push applied
    body: Body
    bad: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64), compare=False)

    @property
    def num_envs(self):
        return self.q.shape[0]

    @property
    def projected_gravity(self):
        roll, pitch = self.attitude[:, 0], self.attitude[:, 1]
        return np.stack([np.sin(pitch), -np.sin(roll) * np.cos(pitch), -np.cos(roll) * np.cos(pitch)], axis=1)

    @property
    def ang_vel(self):
        return np.concatenate([self.attitude_rate, self.yaw_rate[:, None]], axis=1)

    def copy(self) -> "RobotState":
        kw = {name: getattr(self, name).copy() for name in STATE_ARRAYS}
        return RobotState(body=self.body, **kw)

    def select(self, idx) -> "RobotState":
        kw = {name: getattr(self, name)[idx].copy() for name in STATE_ARRAYS}
        body = Body(*[getattr(self.body, g.name)[idx].copy() for g in fields(Body)])
        return RobotState(body=body, **kw)

    def assign(self, idx, other: "RobotState"):
        for name in STATE_ARRAYS:
            getattr(self, name)[idx] = getattr(other, name)
        for g in fields(Body):
            getattr(self.body, g.name)[idx] = getattr(other.body, g.name)


STATE_ARRAYS = tuple(f.name for f in fields(RobotState) if f.name not in ("body", "bad"))
BODY_ARRAYS = tuple(f.name for f in fields(Body))


def stance_flags(cfg: EnvConfig, phase):
    offsets = np.asarray(cfg.phase_offsets, dtype=np.float64)
    return np.sin(np.asarray(phase)[:, None] + offsets[None, :]) < 0.0


def reset_env(cfg: EnvConfig, m, cmd, rng: np.random.Generator, friction=None, payload=None,
              motor_factor=None, joint_noise: float | None = None) -> RobotState:
    """Fresh robot states for a batch of morphologies ``m`` (N, 14).

    ``cmd`` is accepted for symmetry with :func:`step_env`; commands are not
    part of the robot state.
    """
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    if m.shape[1] != MORPH_DIM or not np.all(np.isfinite(m)):
        raise ConfigError("reset_env needs finite (N, 14) morphology vectors")
    n = m.shape[0]
    body = derive_body(cfg, m, friction, payload, motor_factor)
    noise = cfg.joint_noise if joint_noise is None else joint_noise
    q = np.tile(cfg.q_default, (n, 1))
    if noise > 0:
        q = q + rng.uniform(-noise, noise, q.shape)
    q = np.clip(q, cfg.q_lower, cfg.q_upper)
    pos = np.zeros((n, 3))
    pos[:, 2] = cfg.h_target
    phase = np.zeros(n)
    contact = stance_flags(cfg, phase)
    return RobotState(
        pos=pos, vel=np.zeros((n, 3)), yaw=np.zeros(n), yaw_rate=np.zeros(n),
        attitude=np.zeros((n, 2)), attitude_rate=np.zeros((n, 2)),
        q=q, qd=np.zeros((n, 12)), tau=np.zeros((n, 12)), tau_request=np.zeros((n, 12)),
        contact=contact, air_time=np.zeros((n, 4)), foot_force=np.zeros((n, 4, 3)),
        phase=phase, step=np.zeros(n, dtype=np.int64), push_vel=np.zeros((n, 2)), body=body,
    )


def joint_targets(cfg: EnvConfig, body: Body, action):
    return cfg.q_default + body.action_scale * action


def _spring(x, xd, ref, omega, dt):
    acc = omega * omega * (ref - x) - 2.0 * omega * xd
    xd = xd + acc * dt
    return x + xd * dt, xd


def step_env(cfg: EnvConfig, state: RobotState, action, cmd, weights: RewardWeights | None = None,
             prev_action=None, rng: np.random.Generator | None = None, strict: bool = True):
    """Advance one control step; returns ``(next_state, reward_breakdown, done, timeout)``.

    With ``strict=False`` envs whose state turns non-finite are zeroed and
    reported as done (and listed in ``next_state.bad``) instead of raising.
    """
    action = np.asarray(action, dtype=np.float64)
    if strict and not np.all(np.isfinite(action)):
        raise NumericalError("step_env received non-finite action")
    action = np.nan_to_num(action, nan=0.0, posinf=0.0, neginf=0.0)
    weights = weights or RewardWeights()
    cmd = np.atleast_2d(np.asarray(cmd, dtype=np.float64))
    prev_action = np.zeros_like(action) if prev_action is None else prev_action
    b = state.body
    dt, g = cfg.dt, cfg.gravity
    n = state.num_envs
    a = np.clip(action, -cfg.action_clip, cfg.action_clip)

    # (1)-(2) PD torques with per-joint limits
    target = joint_targets(cfg, b, a)
    tau_req = b.strength * (b.kp[:, None] * (target - state.q) - b.kd[:, None] * state.qd)
    tau = np.clip(tau_req, -b.tau_max, b.tau_max)

    # (3) joint update; stance legs carry the body weight at the knee
    stance_prev = state.contact.astype(np.float64)
    n_stance = np.maximum(stance_prev.sum(axis=1), 1.0)
    load = b.mass * g / n_stance * cfg.load_gain * b.leg_length
    tau_ext = np.zeros((n, 12))
    tau_ext[:, CALF] = -load[:, None] * stance_prev
    qdd = (tau + tau_ext) / b.inertia
    qd = state.qd + qdd * dt
    q = state.q + qd * dt
    lo, hi = cfg.q_lower, cfg.q_upper
    at_limit = (q < lo) | (q > hi)
    q = np.clip(q, lo, hi)
    qd = np.where(at_limit, 0.0, qd)
    # thrust follows the travel actually made this step, including the part up to a limit stop
    sweep = (state.q - q) / dt

    # (4) gait clock
    phase = np.mod(state.phase + 2.0 * math.pi * cfg.gait_frequency * dt, 2.0 * math.pi)
    contact = stance_flags(cfg, phase)
    s = contact.astype(np.float64)
    n_st = s.sum(axis=1)

    # (5) planar base dynamics
    eff = 1.25 * b.friction / (b.friction + 0.25)
    lever = (eff * b.leg_length)[:, None]
    sweep_x, sweep_y = sweep[:, THIGH], sweep[:, HIP]
    f_x = cfg.thrust * lever * s * sweep_x * (1.0 + cfg.thrust_rate_gain * np.abs(sweep_x))
    f_y = cfg.lateral_thrust * lever * s * sweep_y * (1.0 + cfg.thrust_rate_gain * np.abs(sweep_y))
    vx, vy = state.vel[:, 0], state.vel[:, 1]
    w = state.yaw_rate
    ax = f_x.sum(axis=1) / b.mass - cfg.drag * vx + w * vy
    ay = f_y.sum(axis=1) / b.mass - cfg.drag * vy - w * vx
    wdot = cfg.yaw_thrust * (f_x * SIDE).sum(axis=1) / b.mass - cfg.yaw_drag * w
    vx = vx + ax * dt
    vy = vy + ay * dt
    w = w + wdot * dt
    push_vel = state.push_vel
    step = state.step + 1
    if cfg.push_enabled and rng is not None:
        due = (step % cfg.push_interval_steps) == 0
        if np.any(due):
            push = rng.uniform(-cfg.push_velocity, cfg.push_velocity, (n, 2)) * due[:, None]
            vx = vx + push[:, 0]
            vy = vy + push[:, 1]
            push_vel = np.where(due[:, None], push, push_vel)
    yaw = state.yaw + w * dt
    c, sn = np.cos(yaw), np.sin(yaw)
    pos = state.pos.copy()
    pos[:, 0] += (c * vx - sn * vy) * dt
    pos[:, 1] += (sn * vx + c * vy) * dt

    # (6) attitude and height springs
    dq = q - cfg.q_default
    ext = b.leg_length[:, None] * (0.5 * dq[:, CALF] + 0.1 * dq[:, THIGH] + 0.2 * dq[:, HIP])
    denom = np.maximum(n_st, 1.0)
    excess = np.abs(tau_req) - b.tau_max
    excess = np.maximum(excess, 0.0).reshape(n, N_LEGS, 3).sum(axis=2)
    roll_ref = cfg.posture_gain * (s * SIDE * ext).sum(axis=1) / denom / cfg.half_track \
        + cfg.saturation_gain * (excess * SIDE).sum(axis=1)
    pitch_ref = cfg.posture_gain * (s * FRONT * ext).sum(axis=1) / denom / cfg.half_track \
        + cfg.saturation_gain * (excess * FRONT).sum(axis=1)
    ref = np.stack([roll_ref, pitch_ref], axis=1)
    attitude, attitude_rate = _spring(state.attitude, state.attitude_rate, ref, cfg.attitude_freq, dt)
    h_ref = cfg.h_target + (s * ext).sum(axis=1) / denom - cfg.sag_gain * excess.sum(axis=1)
    h, vz = _spring(state.pos[:, 2], state.vel[:, 2], h_ref, cfg.height_freq, dt)
    pos[:, 2] = h

    # contacts, forces, air time
    fz = s * (b.mass * g / denom)[:, None]
    foot_force = np.stack([f_x, f_y, fz], axis=-1)
    first_contact = contact & ~state.contact
    air_time = state.air_time + dt
    swing_time = air_time.copy()
    air_time = np.where(contact, 0.0, air_time)

    next_state = RobotState(
        pos=pos, vel=np.stack([vx, vy, vz], axis=1), yaw=yaw, yaw_rate=w,
        attitude=attitude, attitude_rate=attitude_rate, q=q, qd=qd, tau=tau, tau_request=tau_req,
        contact=contact, air_time=air_time, foot_force=foot_force, phase=phase, step=step,
        push_vel=push_vel, body=b,
    )

    # (7) termination
    timeout = step >= cfg.episode_steps
    tilt = np.sqrt(np.sum(attitude ** 2, axis=1))
    failed = (h < cfg.fail_height_frac * cfg.h_target) | (tilt > cfg.fail_tilt)
    if not cfg.failure_enabled:
        failed = np.zeros(n, dtype=bool)
    done = timeout | failed

    finite = np.all(np.isfinite(q), axis=1) & np.all(np.isfinite(next_state.vel), axis=1) & np.isfinite(h)
    if not np.all(finite):
        bad = np.flatnonzero(~finite)
        if strict:
            raise NumericalError(f"surrogate state became non-finite in envs {bad.tolist()}")
        for name in STATE_ARRAYS:
            arr = getattr(next_state, name)
            if arr.dtype.kind == "f":
                arr[bad] = np.nan_to_num(arr[bad], nan=0.0, posinf=0.0, neginf=0.0)
        done = done.copy()
        done[bad] = True
        h, q, qd, tau = next_state.pos[:, 2], next_state.q, next_state.qd, next_state.tau
        foot_force = next_state.foot_force
    next_state.bad = np.flatnonzero(~finite)

    body_contacts = np.where(h < cfg.collision_height_frac * cfg.h_target, float(N_LEGS), 0.0)
    q_min, q_max = cfg.soft_limits()
    rin = RewardInputs(
        lin_vel=next_state.vel, ang_vel=next_state.ang_vel, projected_gravity=next_state.projected_gravity,
        height=h, q=q, qd=qd, qd_prev=state.qd, tau=tau, action=a, prev_action=prev_action,
        command=cmd, first_contact=first_contact, air_time=swing_time, foot_force=foot_force,
        body_contacts=body_contacts, reset=done, timeout=timeout & ~failed,
        q_default=cfg.q_default, q_min=q_min, q_max=q_max, qd_max=cfg.dof_vel_max,
        tau_max=cfg.soft_limit * b.tau_max, h_target=cfg.h_target, dt=dt,
        force_max=cfg.contact_force_max,
    )
    return next_state, compute_rewards(rin, weights), done, timeout & ~failed


def observe(cfg: EnvConfig, state: RobotState, cmd, prev_action, privileged: bool = False):
    """Policy observation (N, 48), or the privileged observation (N, 18)."""
    n = state.num_envs
    if privileged:
        b = state.body
        fz = state.foot_force[..., 2]
        mg = (b.mass * cfg.gravity)[:, None]
        pair = np.stack([fz[:, 0] + fz[:, 3], fz[:, 1] + fz[:, 2]], axis=1) / mg
        return np.concatenate([
            b.friction[:, None], b.payload[:, None], b.strength, state.push_vel, pair,
        ], axis=1)
    sc = cfg.obs_scales
    cmd = np.broadcast_to(np.asarray(cmd, dtype=np.float64), (n, 3))
    return np.concatenate([
        state.vel * sc["lin_vel"],
        state.ang_vel * sc["ang_vel"],
        state.projected_gravity,
        cmd,
        (state.q - cfg.q_default) * sc["dof_pos"],
        state.qd * sc["dof_vel"],
        np.asarray(prev_action, dtype=np.float64),
    ], axis=1)


def top_speed(cfg: EnvConfig, m, amplitude: float = 4.0, seconds: float = 3.0, average_s: float = 1.0) -> np.ndarray:
    """Steady forward speed under a saturating scripted trot (failure disabled).

    Stance legs drive the thigh target to ``-amplitude``, swing legs to
    ``+amplitude``; the result is the mean forward speed over the last
    ``average_s`` seconds.
    """
    cfg = replace(cfg, failure_enabled=False, push_enabled=False, joint_noise=0.0)
    m = np.atleast_2d(m)
    n = m.shape[0]
    state = reset_env(cfg, m, None, np.random.default_rng(0), joint_noise=0.0)
    steps = int(round(seconds / cfg.dt))
    tail = int(round(average_s / cfg.dt))
    speeds = np.zeros(n)
    zero_cmd = np.zeros((n, 3))
    for t in range(steps):
        a = np.zeros((n, ACTION_DIM))
        a[:, THIGH] = np.where(state.contact, -amplitude, amplitude)
        state, _, _, _ = step_env(cfg, state, a, zero_cmd)
        if t >= steps - tail:
            speeds += state.vel[:, 0]
    return speeds / tail


def history_step(obs, action):
    return np.concatenate([obs, action], axis=-1)


class QuadrupedVecEnv:
    """Batch of surrogate robots with per-env morphology, command and history.

    ``morph_sampler(n, rng) -> (n, 14)`` and ``command_sampler(n, rng) ->
    (n, 3)`` are called for envs that start a new episode. Completed
    episodes are reported through the ``infos`` list returned by
    :meth:`step`.
    """

    def __init__(self, cfg: EnvConfig, morph_sampler, command_sampler, rng: np.random.Generator,
                 weights: RewardWeights | None = None, history_len: int = 30):
        self.cfg = cfg
        self.morph_sampler = morph_sampler
        self.command_sampler = command_sampler
        self.rng = rng
        self.weights = weights or RewardWeights()
        self.history_len = history_len
        n = cfg.num_envs
        self.num_envs = n
        self.morph = np.zeros((n, MORPH_DIM))
        self.cmd = np.zeros((n, 3))
        self.prev_action = np.zeros((n, ACTION_DIM))
        self.history = np.zeros((n, history_len, OBS_DIM + ACTION_DIM))
        self.ep_track = np.zeros((n, 2))     # weighted r_lin, r_ang summed over the episode
        self.ep_reward = np.zeros(n)
        self.ep_len = np.zeros(n, dtype=np.int64)
        self.state = None
        self.reset_all()

    # -- episode management -------------------------------------------------
    def _privileged_factors(self, n):
        cfg = self.cfg
        if not cfg.randomize_privileged:
            return None, None, None
        friction = self.rng.uniform(*cfg.friction_range, n)
        payload = self.rng.uniform(*cfg.payload_range, n)
        motor = self.rng.uniform(1.0 - cfg.motor_noise, 1.0 + cfg.motor_noise, (n, ACTION_DIM))
        return friction, payload, motor

    def _fresh(self, idx):
        n = len(idx)
        m = np.atleast_2d(self.morph_sampler(n, self.rng))
        cmd = np.atleast_2d(self.command_sampler(n, self.rng))
        fr, pl, mo = self._privileged_factors(n)
        st = reset_env(self.cfg, m, cmd, self.rng, friction=fr, payload=pl, motor_factor=mo)
        self.morph[idx] = m
        self.cmd[idx] = cmd
        self.prev_action[idx] = 0.0
        self.history[idx] = 0.0
        self.ep_track[idx] = 0.0
        self.ep_reward[idx] = 0.0
        self.ep_len[idx] = 0
        return st

    def reset_all(self):
        idx = np.arange(self.num_envs)
        self.state = self._fresh(idx)

    def reset_idx(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size == 0:
            return
        self.state.assign(idx, self._fresh(idx))

    # -- observation ----------------------------------------------------------
    def observations(self):
        obs = observe(self.cfg, self.state, self.cmd, self.prev_action)
        priv = observe(self.cfg, self.state, self.cmd, self.prev_action, privileged=True)
        return obs, priv, self.history.reshape(self.num_envs, -1).copy()

    def step(self, action, obs=None):
        """Apply ``action``; returns (reward, done, timeout, breakdown, infos).

        ``obs`` is the observation the action was chosen from; it is pushed
        into the history window together with the action.
        """
        cfg = self.cfg
        if obs is None:
            obs = observe(cfg, self.state, self.cmd, self.prev_action)
        self.history[:, :-1] = self.history[:, 1:]
        self.history[:, -1] = history_step(obs, action)
        new_state, rb, done, timeout = step_env(cfg, self.state, action, self.cmd, self.weights,
                                                self.prev_action, self.rng, strict=False)
        self.state = new_state
        self.prev_action = np.clip(np.asarray(action, dtype=np.float64), -cfg.action_clip, cfg.action_clip)
        total = rb.total
        w = rb.weighted
        self.ep_track[:, 0] += w["tracking_lin_vel"]
        self.ep_track[:, 1] += w["tracking_ang_vel"]
        self.ep_reward += total
        self.ep_len += 1
        infos = []
        done_idx = np.flatnonzero(done)
        for i in done_idx:
            infos.append({
                "env": int(i),
                "command": self.cmd[i].copy(),
                "r_lin": float(self.ep_track[i, 0] / cfg.episode_steps),
                "r_ang": float(self.ep_track[i, 1] / cfg.episode_steps),
                "tracking": float(self.ep_track[i].sum() / cfg.episode_steps),
                "reward": float(self.ep_reward[i]),
                "length": int(self.ep_len[i]),
                "failed": bool(not timeout[i]),
                "nonfinite": bool(i in new_state.bad),
            })
        if new_state.bad.size:
            log.getLogger(__name__).warning("non-finite state in envs %s; resetting", new_state.bad.tolist())
        self.reset_idx(done_idx)
        return total, done, timeout, rb, infos

    # -- persistence ---------------------------------------------------------
    def state_arrays(self) -> dict:
        out = {f"env.state.{k}": getattr(self.state, k) for k in STATE_ARRAYS}
        out.update({f"env.body.{k}": getattr(self.state.body, k) for k in BODY_ARRAYS})
        out.update({
            "env.morph": self.morph, "env.cmd": self.cmd, "env.prev_action": self.prev_action,
            "env.history": self.history, "env.ep_track": self.ep_track,
            "env.ep_reward": self.ep_reward, "env.ep_len": self.ep_len,
        })
        return out

    def load_state_arrays(self, arrays: dict):
        body = Body(*[np.array(arrays[f"env.body.{k}"]) for k in BODY_ARRAYS])
        st = {k: np.array(arrays[f"env.state.{k}"]) for k in STATE_ARRAYS}
        st["contact"] = st["contact"].astype(bool)
        self.state = RobotState(body=body, **st)
        for k in ("morph", "cmd", "prev_action", "history", "ep_track", "ep_reward", "ep_len"):
            setattr(self, k, np.array(arrays[f"env.{k}"]))


class TrajectoryRecorder:
    """Collects per-step rows for one env and writes them as CSV."""

    def __init__(self, env_index: int = 0):
        self.env_index = env_index
        self.rows = []

    def record(self, t: float, state: RobotState, cmd, breakdown: RewardBreakdown):
        i = self.env_index
        row = {"time": t, "vx": state.vel[i, 0], "vy": state.vel[i, 1], "wz": state.yaw_rate[i],
               "cmd_vx": cmd[i, 0], "cmd_vy": cmd[i, 1], "cmd_wz": cmd[i, 2]}
        row.update({k: float(np.asarray(v)[i]) for k, v in breakdown.terms.items()})
        row["total"] = float(np.asarray(breakdown.total)[i])
        self.rows.append(row)

    def write(self, path):
        if not self.rows:
            return
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(self.rows[0]))
            writer.writeheader()
            for r in self.rows:
                writer.writerow({k: f"{float(v):.9g}" for k, v in r.items()})
