"""Run configuration: YAML loading, dotted overrides and validation."""
from __future__ import annotations

import copy
import os
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from . import yamlio
from .env import EnvConfig
from .errors import ConfigError
from .hacl import CurriculumConfig
from .morphology import MorphologyRange, default_range
from .policy import VARIANTS, NetworkSizes, get_variant
from .ppo import PPOConfig
from .rewards import RewardWeights

CONFIG_DIR_ENV = "MCARL_CONFIG_DIR"

TOP_LEVEL = {"seed", "variant", "output_dir", "iterations", "checkpoint_every", "num_envs",
             "train_preset", "env", "ppo", "rewards", "curriculum", "network", "morphology", "eval"}


@dataclass
class EvalSettings:
    episodes: int = 1
    episode_steps: int = 400
    seeds: tuple = (0,)

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown eval fields: {sorted(unknown)}")
        if "seeds" in d:
            d["seeds"] = tuple(int(s) for s in d["seeds"])
        return cls(**d)


@dataclass
class RunConfig:
    seed: int
    variant: str
    output_dir: str
    iterations: int
    checkpoint_every: int
    num_envs: int
    train_preset: str
    env: EnvConfig
    ppo: PPOConfig
    rewards: RewardWeights
    curriculum: CurriculumConfig
    network: NetworkSizes
    morphology: MorphologyRange
    eval: EvalSettings = field(default_factory=EvalSettings)

    def to_dict(self) -> dict:
        env = asdict(self.env)
        for k, v in env.items():
            if isinstance(v, tuple):
                env[k] = list(v)
        net = asdict(self.network)
        for k, v in net.items():
            if isinstance(v, tuple):
                net[k] = list(v)
        cur = self.curriculum.to_dict()
        cur["initial_high"] = list(cur["initial_high"])
        ev = asdict(self.eval)
        ev["seeds"] = list(ev["seeds"])
        return {
            "seed": self.seed, "variant": self.variant, "output_dir": self.output_dir,
            "iterations": self.iterations, "checkpoint_every": self.checkpoint_every,
            "num_envs": self.num_envs, "train_preset": self.train_preset,
            "env": env, "ppo": self.ppo.to_dict(), "rewards": self.rewards.to_dict(),
            "curriculum": cur, "network": net, "morphology": self.morphology.to_dict(), "eval": ev,
        }

    def dump(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


def default_config_dict() -> dict:
    text = resources.files("mcarl").joinpath("data/default.yaml").read_text()
    return yamlio.load(text)


def deep_merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (extra or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(text: str):
    """``a.b.c=value`` -> (["a", "b", "c"], parsed YAML value)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key.path=value")
    key, _, raw = text.partition("=")
    try:
        value = yamlio.load(raw)
    except yamlio.YAMLError as exc:
        raise ConfigError(f"override {text!r}: cannot parse value") from exc
    return key.strip().split("."), value


def apply_overrides(data: dict, overrides) -> dict:
    data = copy.deepcopy(data)
    for item in overrides or ():
        path, value = parse_override(item) if isinstance(item, str) else item
        node = data
        for p in path[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {'.'.join(path)} crosses a scalar")
        node[path[-1]] = value
    return data


def resolve_config_path(path) -> Path:
    p = Path(path)
    if p.exists():
        return p
    base = os.environ.get(CONFIG_DIR_ENV)
    if base:
        for cand in (Path(base) / p, Path(base) / f"{p}.yaml"):
            if cand.exists():
                return cand
    raise ConfigError(f"config file not found: {path}")


def load_yaml(path) -> dict:
    path = resolve_config_path(path)
    try:
        data = yamlio.load(path.read_text()) or {}
    except yamlio.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" line {mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{path}:{where} YAML parse error") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def _section(name, builder, data):
    try:
        return builder(data.get(name))
    except ConfigError as exc:
        raise ConfigError(f"{name}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def build_run_config(data: dict) -> RunConfig:
    unknown = set(data) - TOP_LEVEL
    if unknown:
        raise ConfigError(f"unknown top-level fields: {sorted(unknown)}")
    if data.get("seed") is None:
        raise ConfigError("seed: required")
    try:
        seed = int(data["seed"])
    except (TypeError, ValueError):
        raise ConfigError(f"seed: expected an integer, got {data['seed']!r}") from None
    variant = str(data.get("variant", "P3"))
    if variant not in VARIANTS:
        raise ConfigError(f"variant: expected one of {sorted(VARIANTS)}, got {variant!r}")
    num_envs = int(data.get("num_envs", 64))
    if num_envs < 1:
        raise ConfigError("num_envs: must be >= 1")
    env_d = dict(data.get("env") or {})
    env_d["num_envs"] = num_envs
    ppo_d = dict(data.get("ppo") or {})
    ppo_d["num_envs"] = num_envs
    env = _section("env", EnvConfig.from_dict, {"env": env_d})
    ppo = _section("ppo", PPOConfig.from_dict, {"ppo": ppo_d})
    rewards = _section("rewards", RewardWeights.from_dict, data)
    cur_d = dict(data.get("curriculum") or {})
    cur_d["kind"] = get_variant(variant).curriculum
    curriculum = _section("curriculum", CurriculumConfig.from_dict, {"curriculum": cur_d})
    network = _section("network", NetworkSizes.from_dict, data)
    morph = data.get("morphology")
    if morph is None:
        morphology = default_range()
    elif isinstance(morph, str):
        from .morphology import load_range
        morphology = load_range(morph)
    else:
        morphology = _section("morphology", MorphologyRange.from_dict, {"morphology": morph})
    ev = _section("eval", EvalSettings.from_dict, data)
    iterations = data.get("iterations")
    iterations = ppo.iterations if iterations is None else int(iterations)
    if iterations < 1:
        raise ConfigError("iterations: must be >= 1")
    every = int(data.get("checkpoint_every", 50))
    if every < 1:
        raise ConfigError("checkpoint_every: must be >= 1")
    return RunConfig(seed=seed, variant=variant, output_dir=str(data.get("output_dir", "runs/default")),
                     iterations=iterations, checkpoint_every=every, num_envs=num_envs,
                     train_preset=str(data.get("train_preset", "go1")), env=env, ppo=ppo,
                     rewards=rewards, curriculum=curriculum, network=network,
                     morphology=morphology, eval=ev)


def load_run_config(path=None, overrides=None, extra: dict | None = None) -> RunConfig:
    data = default_config_dict()
    if path is not None:
        data = deep_merge(data, load_yaml(path))
    if extra:
        data = deep_merge(data, extra)
    data = apply_overrides(data, overrides)
    return build_run_config(data)


def config_from_dict(d: dict) -> RunConfig:
    """Rebuild a config from :meth:`RunConfig.to_dict` output (e.g. a checkpoint header)."""
    return build_run_config(d)
