"""Morphology/control vectors: schema, sampling, encoding and distance.

A morphology vector is a flat array of 14 reals in the canonical order
listed in ``data/morphology.yaml``. Batches are ``(N, 14)`` arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import yamlio
from .errors import ConfigError

MORPH_DIM = 14

PARAM_NAMES = (
    "hip_to_thigh_length",
    "thigh_to_calf_length",
    "calf_to_foot_length",
    "thigh_mass",
    "calf_mass",
    "hip_mass",
    "foot_mass",
    "base_mass",
    "joint_stiffness",
    "joint_damping",
    "action_scale",
    "motor_strength",
    "hip_torque_limit",
    "calf_torque_limit",
)
INDEX = {name: i for i, name in enumerate(PARAM_NAMES)}

MORPH_BLOCK = tuple(range(0, 8))
CONTROL_BLOCK = tuple(range(8, 14))


@dataclass(frozen=True)
class MorphologyRange:
    names: tuple
    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        low = np.asarray(self.low, dtype=np.float64)
        high = np.asarray(self.high, dtype=np.float64)
        if len(self.names) != MORPH_DIM or low.shape != (MORPH_DIM,) or high.shape != (MORPH_DIM,):
            raise ConfigError(f"morphology range needs exactly {MORPH_DIM} entries")
        if not (np.all(np.isfinite(low)) and np.all(np.isfinite(high))):
            raise ConfigError("morphology range bounds must be finite")
        bad = [n for n, lo, hi in zip(self.names, low, high) if lo > hi]
        if bad:
            raise ConfigError(f"min > max for: {', '.join(bad)}")
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)

    @property
    def width(self) -> np.ndarray:
        return self.high - self.low

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.low + self.high)

    def contains(self, m, atol: float = 1e-12) -> bool:
        m = np.asarray(m, dtype=np.float64)
        return bool(np.all(np.isfinite(m)) and np.all(m >= self.low - atol) and np.all(m <= self.high + atol))

    def validate(self, m) -> np.ndarray:
        """Return ``m`` as a float array, raising if any entry is out of range."""
        m = np.asarray(m, dtype=np.float64)
        if m.shape[-1] != MORPH_DIM:
            raise ConfigError(f"morphology vector must have {MORPH_DIM} entries, got {m.shape[-1]}")
        if not self.contains(m):
            rows = np.atleast_2d(m)
            bad = sorted({self.names[k] for r in rows for k in range(MORPH_DIM)
                          if not (self.low[k] - 1e-12 <= r[k] <= self.high[k] + 1e-12)})
            raise ConfigError(f"morphology out of range: {', '.join(bad) or 'non-finite entries'}")
        return m

    def normalize(self, m) -> np.ndarray:
        """Map to [-1, 1] per entry; degenerate (min == max) entries map to 0."""
        m = np.asarray(m, dtype=np.float64)
        w = self.width
        safe = np.where(w > 0, w, 1.0)
        return np.where(w > 0, 2.0 * (m - self.low) / safe - 1.0, 0.0)

    def denormalize(self, u) -> np.ndarray:
        return self.low + 0.5 * (np.asarray(u, dtype=np.float64) + 1.0) * self.width

    @classmethod
    def from_dict(cls, data: dict) -> "MorphologyRange":
        try:
            params = data["parameters"]
            names = tuple(p["name"] for p in params)
            low = [float(p["min"]) for p in params]
            high = [float(p["max"]) for p in params]
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed morphology range: {exc}") from exc
        if names != PARAM_NAMES:
            raise ConfigError(f"parameter order must be {list(PARAM_NAMES)}, got {list(names)}")
        return cls(names, np.array(low), np.array(high))

    def to_dict(self) -> dict:
        return {"parameters": [{"name": n, "min": float(lo), "max": float(hi)}
                               for n, lo, hi in zip(self.names, self.low, self.high)]}


def _default_yaml() -> dict:
    text = resources.files("mcarl").joinpath("data/morphology.yaml").read_text()
    return yamlio.load(text)


def default_range() -> MorphologyRange:
    return MorphologyRange.from_dict(_default_yaml())


def load_range(path) -> MorphologyRange:
    with open(path) as fh:
        return MorphologyRange.from_dict(yamlio.load(fh))


def sample_morphology(rng_range: MorphologyRange, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Draw each entry independently from U[min_k, max_k].

    Returns shape ``(14,)`` when ``n`` is None, otherwise ``(n, 14)``.
    """
    shape = (MORPH_DIM,) if n is None else (n, MORPH_DIM)
    u = rng.random(shape)
    return rng_range.low + u * rng_range.width


# ---------------------------------------------------------------------------
# Encoder z_m = ELU(W2 ELU(W1 m + b1) + b2)

@dataclass
class MorphologyEncoderParams:
    W1: np.ndarray  # (128, 14)
    b1: np.ndarray  # (128,)
    W2: np.ndarray  # (64, 128)
    b2: np.ndarray  # (64,)

    def check(self, in_dim: int = MORPH_DIM) -> None:
        h = self.W1.shape[0]
        ok = (self.W1.shape == (h, in_dim) and self.b1.shape == (h,)
              and self.W2.ndim == 2 and self.W2.shape[1] == h
              and self.b2.shape == (self.W2.shape[0],))
        if not ok:
            raise ConfigError(
                f"encoder shapes inconsistent: W1{self.W1.shape} b1{self.b1.shape} "
                f"W2{self.W2.shape} b2{self.b2.shape}")

    @classmethod
    def init(cls, rng: np.random.Generator, in_dim=MORPH_DIM, hidden=128, latent=64):
        def layer(fan_in, fan_out):
            bound = 1.0 / math.sqrt(fan_in)
            return (rng.uniform(-bound, bound, (fan_out, fan_in)),
                    rng.uniform(-bound, bound, fan_out))
        W1, b1 = layer(in_dim, hidden)
        W2, b2 = layer(hidden, latent)
        return cls(W1, b1, W2, b2)

    @classmethod
    def zeros(cls, in_dim=MORPH_DIM, hidden=128, latent=64):
        return cls(np.zeros((hidden, in_dim)), np.zeros(hidden),
                   np.zeros((latent, hidden)), np.zeros(latent))


def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def encode_morphology(params: MorphologyEncoderParams, m) -> np.ndarray:
    """Latent ``z_m`` for one vector ``(14,)`` or a batch ``(N, 14)``."""
    m = np.asarray(m, dtype=np.float64)
    params.check(in_dim=params.W1.shape[1])
    if m.shape[-1] != params.W1.shape[1]:
        raise ConfigError(f"encoder expects input dim {params.W1.shape[1]}, got {m.shape[-1]}")
    hidden = _elu(m @ params.W1.T + params.b1)
    return _elu(hidden @ params.W2.T + params.b2)


# ---------------------------------------------------------------------------
# Weighted standardized distance

@dataclass(frozen=True)
class DistanceWeights:
    w: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        for name in ("w", "mu", "sigma"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (MORPH_DIM,):
                raise ConfigError(f"distance {name} must have {MORPH_DIM} entries")
            object.__setattr__(self, name, arr)
        if np.any(self.w <= 0) or np.any(self.sigma <= 0):
            raise ConfigError("distance weights and sigmas must be positive")

    @classmethod
    def from_range(cls, rng_range: MorphologyRange, w=None) -> "DistanceWeights":
        # Degenerate ranges would give sigma = 0; fall back to 1 so the
        # coordinate simply contributes its raw difference.
        sigma = rng_range.width / math.sqrt(12.0)
        sigma = np.where(sigma > 0, sigma, 1.0)
        w = np.ones(MORPH_DIM) if w is None else w
        return cls(w, rng_range.midpoint, sigma)

    @classmethod
    def from_dict(cls, data: dict | None, rng_range: MorphologyRange) -> "DistanceWeights":
        data = data or {}
        base = cls.from_range(rng_range, data.get("weights"))
        return cls(data.get("weights", base.w), data.get("mu", base.mu), data.get("sigma", base.sigma))


def default_distance_weights(rng_range: MorphologyRange | None = None) -> DistanceWeights:
    rng_range = rng_range or default_range()
    return DistanceWeights.from_dict(_default_yaml().get("distance"), rng_range)


def morphology_distance(a, b, dw: DistanceWeights) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    za = (a - dw.mu) / dw.sigma
    zb = (b - dw.mu) / dw.sigma
    return float(np.sqrt(np.sum(dw.w * (za - zb) ** 2)))


def distance_matrix(vectors, dw: DistanceWeights) -> np.ndarray:
    vectors = [np.asarray(v, dtype=np.float64) for v in vectors]
    n = len(vectors)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = morphology_distance(vectors[i], vectors[j], dw)
    return out


def as_dict(m) -> dict:
    return {name: float(v) for name, v in zip(PARAM_NAMES, np.asarray(m, dtype=np.float64))}


def load_vector(path) -> np.ndarray:
    """Read a vector file; either YAML mapping name->value or 14 numbers, one per line."""
    path = Path(path)
    text = path.read_text()
    try:
        data = yamlio.load(text)
    except yamlio.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else "?"
        raise ConfigError(f"{path}: parse error at line {line}") from exc
    if isinstance(data, dict):
        vec = data.get("morphology", data)
        if isinstance(vec, dict):
            missing = [n for n in PARAM_NAMES if n not in vec]
            if missing:
                raise ConfigError(f"{path}: missing parameters {missing}")
            return np.array([float(vec[n]) for n in PARAM_NAMES])
        data = vec
    values = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            values.append(float(line))
        except ValueError:
            raise ConfigError(f"{path}: parse error at line {lineno}: {raw!r}") from None
    if len(values) != MORPH_DIM:
        raise ConfigError(f"{path}: expected {MORPH_DIM} values, found {len(values)}")
    return np.array(values)
