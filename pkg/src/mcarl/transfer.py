"""Zero-shot transfer evaluation, the variant-by-robot report and distance correlation."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .checkpoint import load_checkpoint
from .config import RunConfig, config_from_dict
from .env import EnvConfig, QuadrupedVecEnv
from .errors import CheckpointError, ConfigError
from .morphology import DistanceWeights, MorphologyRange, default_distance_weights, morphology_distance
from .policy import VARIANTS, McarlPolicy, Variant, encode_extrinsics_student, get_variant
from .ppo import morph_inputs
from .presets import BUILTIN, RobotPreset, builtin_presets, load_preset
from .rewards import RewardWeights

__all__ = [
    "BUILTIN", "RobotPreset", "builtin_presets", "load_preset",
    "LoadedPolicy", "load_policy", "ZeroShotResult", "evaluate_zero_shot",
    "TransferRow", "TransferReport", "build_transfer_matrix", "distance_performance_correlation",
]


@dataclass
class LoadedPolicy:
    policy: McarlPolicy
    variant: Variant
    config: RunConfig
    iteration: int


def load_policy(path) -> LoadedPolicy:
    """Rebuild a frozen policy from a training checkpoint (read-only)."""
    arrays, meta = load_checkpoint(path)
    try:
        cfg = config_from_dict(meta["config"])
    except (KeyError, ConfigError) as exc:
        raise CheckpointError(f"{path}: checkpoint config unreadable: {exc}") from exc
    policy = McarlPolicy(cfg.network, np.random.default_rng(0))
    try:
        policy.store.load_state_arrays("policy", arrays)
        policy.student_store.load_state_arrays("student", arrays)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: parameter arrays do not match the network config: {exc}") from exc
    return LoadedPolicy(policy, get_variant(cfg.variant), cfg, int(meta.get("iteration", 0)))


@dataclass
class ZeroShotResult:
    preset: str
    speed: float             # mean forward speed at the highest sustained sweep command
    max_sustained_command: float
    tracking: float          # episode-normalised tracking reward over the preset commands
    failure_rate: float
    sweep: list = field(default_factory=list)   # (command, mean speed, failure rate) per sweep point

    def to_dict(self):
        return asdict(self)


def _rollout_fixed(loaded: LoadedPolicy, morph, commands, env_cfg: EnvConfig, weights: RewardWeights,
                   morph_range: MorphologyRange, seed: int):
    """One deterministic student-path episode per command row; all envs share ``morph``."""
    commands = np.asarray(commands, dtype=np.float64).reshape(-1, 3)
    n = len(commands)
    cfg = EnvConfig.from_dict({**asdict(env_cfg), "num_envs": n, "randomize_privileged": False,
                               "push_enabled": False})
    cmd_queue = [commands]

    def cmd_sampler(k, rng):
        # first call fills every env; later resets are never used (episodes are masked)
        return cmd_queue.pop() if cmd_queue and k == n else np.zeros((k, 3))

    morph = np.asarray(morph, dtype=np.float64)
    venv = QuadrupedVecEnv(cfg, lambda k, rng: np.tile(morph, (k, 1)), cmd_sampler,
                           np.random.default_rng(seed), weights)
    policy, variant = loaded.policy, loaded.variant
    m_in = morph_inputs(venv, morph_range, variant)
    alive = np.ones(n, dtype=bool)
    failed = np.zeros(n, dtype=bool)
    track = np.zeros(n)
    vx_late = np.zeros(n)
    late_from = cfg.episode_steps // 2
    for t in range(cfg.episode_steps):
        obs, _, hist = venv.observations()
        e = encode_extrinsics_student(policy, hist)
        x = policy.act_inputs(obs, e, m_in, variant)
        action = policy.actor(x)
        if t >= late_from:
            # body-frame forward speed, read before the step so resets cannot overwrite it
            vx_late += np.where(alive, venv.state.vel[:, 0], 0.0)
        _, done, timeout, rb, _ = venv.step(action, obs)
        w = rb.weighted
        track += np.where(alive, w["tracking_lin_vel"] + w["tracking_ang_vel"], 0.0)
        failed |= alive & done & ~timeout
        alive &= ~done
    steps = cfg.episode_steps - late_from
    return track / cfg.episode_steps, failed, vx_late / steps


def evaluate_zero_shot(policy, preset: RobotPreset, episodes: int = 1, seed: int = 0,
                       env_cfg: EnvConfig | None = None, morph_range: MorphologyRange | None = None,
                       weights: RewardWeights | None = None, episode_steps: int | None = None) -> ZeroShotResult:
    """Deterministic student-path evaluation of a frozen policy on one preset.

    ``policy`` is a checkpoint path or a :class:`LoadedPolicy`. Privileged
    randomisation and pushes are switched off. Each episode index uses its
    own seed (``seed + k``) for the initial joint noise.
    """
    loaded = policy if isinstance(policy, LoadedPolicy) else load_policy(policy)
    cfg = loaded.config
    env_cfg = env_cfg or cfg.env
    if episode_steps is not None:
        env_cfg = EnvConfig.from_dict({**asdict(env_cfg), "episode_steps": int(episode_steps)})
    morph_range = morph_range or cfg.morphology
    weights = weights or cfg.rewards
    if episodes < 1:
        raise ConfigError("episodes must be >= 1")
    sweep = np.asarray(preset.speed_sweep, dtype=np.float64)
    sweep_cmds = np.stack([sweep, np.zeros_like(sweep), np.zeros_like(sweep)], axis=1)
    cmds = np.concatenate([np.asarray(preset.commands, dtype=np.float64), sweep_cmds])
    n_task = len(preset.commands)
    tr, fl, vx = [], [], []
    for k in range(episodes):
        t_k, f_k, v_k = _rollout_fixed(loaded, preset.morphology, cmds, env_cfg, weights, morph_range, seed + k)
        tr.append(t_k)
        fl.append(f_k)
        vx.append(v_k)
    tr, fl, vx = np.array(tr), np.array(fl), np.array(vx)
    sweep_fail = fl[:, n_task:].mean(axis=0)
    sweep_speed = vx[:, n_task:].mean(axis=0)
    ok = np.flatnonzero(sweep_fail == 0.0)
    if ok.size:
        best = ok[np.argmax(sweep[ok])]
        speed, top_cmd = float(sweep_speed[best]), float(sweep[best])
    else:
        speed, top_cmd = 0.0, float("nan")
    return ZeroShotResult(
        preset=preset.name, speed=speed, max_sustained_command=top_cmd,
        tracking=float(tr[:, :n_task].mean()), failure_rate=float(fl[:, :n_task].mean()),
        sweep=[(float(c), float(s), float(f)) for c, s, f in zip(sweep, sweep_speed, sweep_fail)],
    )


# ---------------------------------------------------------------------------
# Report

@dataclass
class TransferRow:
    variant: str
    seed: int
    train_preset: str
    eval_preset: str
    distance: float
    speed: float = float("nan")
    tracking: float = float("nan")
    failure_rate: float = float("nan")
    present: bool = True


@dataclass
class TransferReport:
    rows: list

    def cell(self, variant, eval_preset):
        return [r for r in self.rows if r.variant == variant and r.eval_preset == eval_preset and r.present]

    @property
    def variants(self):
        return sorted({r.variant for r in self.rows})

    @property
    def presets(self):
        seen = []
        for r in self.rows:
            if r.eval_preset not in seen:
                seen.append(r.eval_preset)
        return seen

    def to_csv(self, path=None) -> str:
        fields = list(TransferRow.__dataclass_fields__)
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: _fmt(getattr(r, k)) for k in fields})
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def summary(self, metric: str = "speed") -> dict:
        """{(variant, preset): (mean, sample std, n)} over seeds; absent cells give n = 0."""
        out = {}
        for v in self.variants:
            for p in self.presets:
                vals = [getattr(r, metric) for r in self.cell(v, p)]
                vals = [x for x in vals if math.isfinite(x)]
                if vals:
                    std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
                    out[(v, p)] = (float(np.mean(vals)), std, len(vals))
                else:
                    out[(v, p)] = (float("nan"), float("nan"), 0)
        return out

    def format_table(self, metric: str = "speed") -> str:
        summ = self.summary(metric)
        presets = self.presets
        head = ["Variant", "Inputs", "Curriculum"] + presets
        lines = [head]
        for v in self.variants:
            var = VARIANTS.get(v)
            row = [v, var.inputs if var else "?", ("HACL" if var and var.curriculum == "hacl" else "fixed")]
            for p in presets:
                mean, std, n = summ[(v, p)]
                row.append("absent" if n == 0 else f"{mean:.2f} ± {std:.2f}")
            lines.append(row)
        widths = [max(len(r[i]) for r in lines) for i in range(len(head))]
        fmt = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
        rule = "-" * len(fmt(lines[0]))
        title = {"speed": "Mean forward speed (m/s), mean ± std over seeds",
                 "tracking": "Zero-shot tracking reward, mean ± std over seeds"}.get(metric, metric)
        return "\n".join([title, rule, fmt(lines[0]), rule] + [fmt(r) for r in lines[1:]] + [rule]) + "\n"


def _fmt(v):
    if isinstance(v, float):
        return "" if not math.isfinite(v) else repr(v)
    return v


def build_transfer_matrix(checkpoints: dict, presets, episodes: int = 1, eval_seed: int = 0,
                          distance_weights: DistanceWeights | None = None, train_preset=None,
                          episode_steps: int | None = None, progress=None) -> TransferReport:
    """Evaluate every (variant, seed) checkpoint on every preset.

    ``checkpoints`` maps ``(variant, seed)`` to a checkpoint path (or a
    :class:`LoadedPolicy`); a ``None`` value or a missing file marks the
    whole row group absent instead of raising.
    """
    presets = [p if isinstance(p, RobotPreset) else load_preset(p) for p in presets]
    dw = distance_weights or default_distance_weights()
    rows = []
    for (variant, seed), ckpt in sorted(checkpoints.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        loaded = None
        if ckpt is not None:
            try:
                loaded = ckpt if isinstance(ckpt, LoadedPolicy) else load_policy(ckpt)
            except CheckpointError:
                loaded = None
        tp_key = train_preset or (loaded.config.train_preset if loaded else "go1")
        tp = tp_key if isinstance(tp_key, RobotPreset) else load_preset(tp_key)
        for p in presets:
            d = morphology_distance(tp.morphology, p.morphology, dw)
            if loaded is None:
                rows.append(TransferRow(variant, int(seed), tp.name, p.name, d, present=False))
                continue
            res = evaluate_zero_shot(loaded, p, episodes=episodes, seed=eval_seed, episode_steps=episode_steps)
            rows.append(TransferRow(variant, int(seed), tp.name, p.name, d, res.speed, res.tracking,
                                    res.failure_rate))
            if progress is not None:
                progress(rows[-1])
    return TransferReport(rows)


@dataclass
class CorrelationResult:
    variant: str
    seed: int
    train_preset: str
    rho: float               # nan when undefined
    defined: bool
    reason: str
    pairs: list              # (eval preset, distance, speed)


def spearman_or_undefined(distances, values):
    """(rho, defined, reason). Undefined for < 3 points or a constant column."""
    d = np.asarray(distances, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if d.size < 3:
        return float("nan"), False, "fewer than 3 points"
    if np.ptp(v) == 0.0 or np.ptp(d) == 0.0:
        return float("nan"), False, "constant column"
    rho = stats.spearmanr(d, v).statistic
    return float(rho), True, ""


def distance_performance_correlation(report: TransferReport, metric: str = "speed") -> list:
    """Spearman correlation of morphology distance vs. ``metric`` per (variant, seed)."""
    groups = {}
    for r in report.rows:
        if r.present:
            groups.setdefault((r.variant, r.seed, r.train_preset), []).append(r)
    out = []
    for (variant, seed, tp), rows in sorted(groups.items()):
        pairs = [(r.eval_preset, r.distance, getattr(r, metric)) for r in rows]
        rho, ok, why = spearman_or_undefined([p[1] for p in pairs], [p[2] for p in pairs])
        out.append(CorrelationResult(variant, seed, tp, rho, ok, why, pairs))
    return out


def correlation_csv(results, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "seed", "train_preset", "eval_preset", "distance", "value", "spearman", "defined"])
    for c in results:
        for name, d, v in c.pairs:
            w.writerow([c.variant, c.seed, c.train_preset, name, repr(d), repr(v),
                        "" if not c.defined else repr(c.rho), c.defined])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text
