"""Training loop: rollout -> GAE -> PPO update -> curriculum update, with resume."""
from __future__ import annotations

import json
import logging
import math
from pathlib import Path

import numpy as np

from . import hacl
from .checkpoint import load_checkpoint, save_checkpoint, write_manifest
from .config import RunConfig, config_from_dict
from .env import QuadrupedVecEnv
from .errors import CheckpointError, ConfigError
from .morphology import sample_morphology
from .policy import McarlPolicy, get_variant
from .ppo import collect_rollout, compute_batch_gae, ppo_update
from .presets import load_preset

log = logging.getLogger(__name__)

RNG_STREAMS = ("init", "env", "action", "update", "curriculum")


def _rng_state(g: np.random.Generator) -> dict:
    return g.bit_generator.state


def _set_rng_state(g: np.random.Generator, state: dict):
    g.bit_generator.state = state


def _json_safe(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_safe(v) for v in x]
    if isinstance(x, np.generic):
        return _json_safe(x.item())
    return x


class Trainer:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.variant = get_variant(cfg.variant)
        seqs = np.random.SeedSequence(cfg.seed).spawn(len(RNG_STREAMS))
        self.rngs = {name: np.random.default_rng(s) for name, s in zip(RNG_STREAMS, seqs)}
        self.policy = McarlPolicy(cfg.network, self.rngs["init"])
        self.curriculum = hacl.make_curriculum(cfg.curriculum, rng=self.rngs["curriculum"])
        self.shared_vector = None
        if self.variant.shared_morphology:
            self.shared_vector = load_preset(cfg.train_preset, cfg.morphology).morphology
        self.venv = QuadrupedVecEnv(cfg.env, self._sample_morphology, self._sample_commands,
                                    self.rngs["env"], cfg.rewards)
        self.iteration = 0
        self.lr = cfg.ppo.lr
        self.last_tracking = float("nan")
        self.history: list[dict] = []

    # samplers used by the vector env on episode start
    def _sample_morphology(self, n, rng):
        if self.shared_vector is not None:
            return np.tile(self.shared_vector, (n, 1))
        return sample_morphology(self.cfg.morphology, rng, n)

    def _sample_commands(self, n, rng):
        cmds, _ = hacl.sample_command_from_bins(self.curriculum, rng, n)
        return cmds

    # ------------------------------------------------------------------
    def train_iteration(self) -> dict:
        cfg = self.cfg
        batch, infos, step_stats = collect_rollout(self.policy, self.venv, self.variant, cfg.ppo,
                                                   self.rngs["action"], cfg.morphology)
        compute_batch_gae(batch, cfg.ppo.gamma, cfg.ppo.lam)
        upd = ppo_update(self.policy, self.variant, batch, cfg.ppo, self.rngs["update"], self.lr)
        self.lr = upd["lr"]
        grid = self.curriculum.grid
        visits = [(hacl.command_bin_index(grid, i["command"]), i["r_lin"], i["r_ang"]) for i in infos]
        cur = hacl.curriculum_update(self.curriculum, visits)
        if infos:
            self.last_tracking = float(np.mean([i["tracking"] for i in infos]))
        self.iteration += 1
        row = {
            "iteration": self.iteration,
            "mean_reward": float(np.mean([i["reward"] for i in infos])) if infos else None,
            "mean_tracking_reward": self.last_tracking,
            "step_tracking_reward": step_stats["step_tracking"],
            "step_reward": step_stats["step_reward"],
            "episodes": len(infos),
            "failure_rate": float(np.mean([i["failed"] for i in infos])) if infos else None,
            "mean_episode_length": float(np.mean([i["length"] for i in infos])) if infos else None,
            "kl": upd.get("kl"), "lr": self.lr,
            "loss": upd.get("loss"), "surrogate_loss": upd.get("surrogate_loss"),
            "value_loss": upd.get("value_loss"), "entropy": upd.get("entropy"),
            "student_loss": upd.get("student_loss"), "aborted": upd["aborted"],
            "curriculum_active_bins": cur["active_bins"],
            "curriculum_weight_entropy": cur["weight_entropy"],
            "curriculum_rnn_loss": cur.get("rnn_loss"),
            "action_std": float(np.mean(np.exp(self.policy.log_std))),
        }
        row = _json_safe(row)
        self.history.append(row)
        return row

    # ------------------------------------------------------------------
    def state_arrays(self) -> dict:
        out = {}
        out.update(self.policy.store.state_arrays("policy"))
        out.update(self.policy.student_store.state_arrays("student"))
        out.update(hacl.state_arrays(self.curriculum))
        out.update(self.venv.state_arrays())
        return out

    def meta(self) -> dict:
        # the run location is not part of the experiment, so identical runs give identical bytes
        cfg = self.cfg.to_dict()
        cfg.pop("output_dir")
        return _json_safe({
            "config": cfg,
            "iteration": self.iteration,
            "lr": self.lr,
            "last_tracking": self.last_tracking,
            "rng": {k: _rng_state(g) for k, g in self.rngs.items()},
            "metrics": self.history[-1] if self.history else {},
        })

    def save(self, path) -> str:
        return save_checkpoint(path, self.state_arrays(), self.meta())

    def load_state(self, arrays: dict, meta: dict):
        self.policy.store.load_state_arrays("policy", arrays)
        self.policy.student_store.load_state_arrays("student", arrays)
        hacl.load_state_arrays(self.curriculum, arrays)
        self.venv.load_state_arrays(arrays)
        self.iteration = int(meta["iteration"])
        self.lr = float(meta["lr"])
        lt = meta.get("last_tracking")
        self.last_tracking = float("nan") if lt is None else float(lt)
        for k, g in self.rngs.items():
            _set_rng_state(g, meta["rng"][k])

    @classmethod
    def from_checkpoint(cls, path) -> "Trainer":
        arrays, meta = load_checkpoint(path)
        try:
            cfg = config_from_dict(meta["config"])
        except (KeyError, ConfigError) as exc:
            raise CheckpointError(f"checkpoint config unreadable: {exc}") from exc
        tr = cls(cfg)
        tr.load_state(arrays, meta)
        return tr


def run_training(cfg: RunConfig, resume: str | None = None, stop_after: int | None = None,
                 progress=None) -> Trainer:
    """Full training run writing config, metrics JSONL, checkpoints and a manifest.

    ``stop_after`` ends the run early after that many total iterations
    (used to test resume); the final checkpoint is still written.
    """
    out = Path(cfg.output_dir)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    if resume:
        trainer = Trainer.from_checkpoint(resume)
        trainer.cfg.output_dir = cfg.output_dir
        # keep metric rows up to the resume point, drop anything after
        if metrics_path.exists():
            rows = [json.loads(l) for l in metrics_path.read_text().splitlines() if l.strip()]
            rows = [r for r in rows if r["iteration"] <= trainer.iteration]
            metrics_path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    else:
        trainer = Trainer(cfg)
        metrics_path.write_text("")
    cfg.dump(out / "config.yaml")
    end = trainer.cfg.iterations if stop_after is None else min(stop_after, trainer.cfg.iterations)
    try:
        while trainer.iteration < end:
            row = trainer.train_iteration()
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
            if progress is not None:
                progress(row)
            if trainer.iteration % trainer.cfg.checkpoint_every == 0:
                trainer.save(ckpt_dir / f"iter_{trainer.iteration:06d}.ckpt")
                trainer.save(ckpt_dir / "last.ckpt")
    except BaseException:
        # keep the last good checkpoint; the partial iteration is dropped
        write_manifest(out)
        raise
    trainer.save(ckpt_dir / "last.ckpt")
    write_manifest(out)
    return trainer


def read_metrics(run_dir) -> list:
    path = Path(run_dir) / "metrics.jsonl"
    return [json.loads(l) for l in path.read_text().splitlines() if l.strip()]
