"""Robot presets: a named morphology vector plus evaluation commands."""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import yamlio
from .errors import ConfigError
from .morphology import PARAM_NAMES, MorphologyRange, default_range

BUILTIN = ("go1", "go2", "mini_cheetah", "a1")

DEFAULT_COMMANDS = ((0.5, 0.0, 0.0), (1.0, 0.0, 0.0), (-0.5, 0.0, 0.0),
                    (0.0, 0.5, 0.0), (0.0, 0.0, 1.0), (0.8, 0.0, -0.8))
DEFAULT_SWEEP = tuple(0.5 * k for k in range(1, 13))


@dataclass
class RobotPreset:
    name: str
    morphology: np.ndarray
    commands: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_COMMANDS))
    speed_sweep: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_SWEEP))

    def validate(self, rng_range: MorphologyRange | None = None):
        (rng_range or default_range()).validate(self.morphology)
        return self

    @classmethod
    def from_dict(cls, d: dict, source: str = "<preset>") -> "RobotPreset":
        if not isinstance(d, dict) or "name" not in d or "morphology" not in d:
            raise ConfigError(f"{source}: preset needs 'name' and 'morphology'")
        morph = d["morphology"]
        if isinstance(morph, dict):
            missing = [n for n in PARAM_NAMES if n not in morph]
            if missing:
                raise ConfigError(f"{source}: missing parameters {missing}")
            vec = np.array([float(morph[n]) for n in PARAM_NAMES])
        else:
            vec = np.asarray(morph, dtype=np.float64)
        cmds = np.asarray(d.get("commands", DEFAULT_COMMANDS), dtype=np.float64).reshape(-1, 3)
        sweep = np.asarray(d.get("speed_sweep", DEFAULT_SWEEP), dtype=np.float64).reshape(-1)
        return cls(str(d["name"]), vec, cmds, sweep)


def load_preset(ref, rng_range: MorphologyRange | None = None) -> RobotPreset:
    """Load a preset by built-in key (``go1``...) or by YAML path."""
    key = str(ref)
    if key in BUILTIN and not Path(key).exists():
        text = resources.files("mcarl").joinpath(f"data/presets/{key}.yaml").read_text()
        source = f"builtin:{key}"
    else:
        path = Path(key)
        if not path.exists():
            raise ConfigError(f"preset file not found: {path}")
        text = path.read_text()
        source = str(path)
    try:
        data = yamlio.load(text)
    except yamlio.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else "?"
        raise ConfigError(f"{source}: parse error at line {line}") from exc
    preset = RobotPreset.from_dict(data, source)
    try:
        preset.validate(rng_range)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return preset


def builtin_presets(rng_range: MorphologyRange | None = None) -> list:
    return [load_preset(k, rng_range) for k in BUILTIN]
