"""Small differentiable-computation core.

Networks here are static layer lists with hand-written backward passes; no
general tape. Everything runs in float64. Parameters live in a
:class:`ParamStore`, which also owns the gradient accumulators and the Adam
moment buffers, so a store is the unit of optimisation and serialisation.
"""
from __future__ import annotations

import math
from collections.abc import Callable, Sequence

import numpy as np

from .errors import ConfigError, NumericalError, UsageError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def elu_apply(x):
    x = np.asarray(x, dtype=np.float64)
    # expm1(x) >= x everywhere, so the max picks the right branch on both sides
    return np.maximum(x, np.expm1(np.minimum(x, 0.0)))


def elu_grad(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(np.minimum(x, 0.0))


def _elu_grad_from_output(y):
    # y = elu(x): slope is 1 for x > 0 and exp(x) = y + 1 otherwise
    return np.minimum(y + 1.0, 1.0)


def sigmoid(x):
    # Split by sign to avoid overflow in exp.
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def affine_forward(W, b, x):
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2 or W.shape[1] != x.shape[-1] or b.shape != (W.shape[0],):
        raise ConfigError(f"affine shape mismatch: W{W.shape} b{b.shape} x{x.shape}")
    return x @ W.T + b


class ParamStore:
    """Named parameter arrays plus gradients and Adam state."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value) -> np.ndarray:
        if name in self.params:
            raise ConfigError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.params)

    def size(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(g * g)) for g in self.grads.values()))

    def set(self, name, value):
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.params[name].shape:
            raise ConfigError(f"{name}: shape {value.shape} != {self.params[name].shape}")
        self.params[name][...] = value

    def copy_params(self) -> dict:
        return {k: v.copy() for k, v in self.params.items()}

    def restore_params(self, snapshot: dict):
        for k, v in snapshot.items():
            self.params[k][...] = v

    def state_arrays(self, prefix: str) -> dict:
        out = {}
        for name in self.params:
            out[f"{prefix}/param/{name}"] = self.params[name]
            out[f"{prefix}/adam_m/{name}"] = self.m[name]
            out[f"{prefix}/adam_v/{name}"] = self.v[name]
        out[f"{prefix}/step"] = np.array([self.step], dtype=np.int64)
        return out

    def load_state_arrays(self, prefix: str, arrays: dict):
        for name in self.params:
            for kind, target in (("param", self.params), ("adam_m", self.m), ("adam_v", self.v)):
                key = f"{prefix}/{kind}/{name}"
                if key not in arrays:
                    raise ConfigError(f"missing array {key}")
                src = np.asarray(arrays[key], dtype=np.float64)
                if src.shape != target[name].shape:
                    raise ConfigError(f"{key}: shape {src.shape} != {target[name].shape}")
                target[name][...] = src
        self.step = int(np.asarray(arrays[f"{prefix}/step"])[0])
        self.zero_grad()


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    norm = store.grad_norm()
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in store.grads.values():
            g *= scale
    return norm


def adam_step(store: ParamStore, lr: float, max_grad_norm: float | None = 1.0,
              beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS) -> float:
    """Clip the global gradient norm, apply one bias-corrected Adam update, zero grads.

    Returns the pre-clip gradient norm.
    """
    for name, g in store.grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in parameter {name!r}")
    norm = clip_grad_norm(store, max_grad_norm)
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.params.items():
        g = store.grads[name]
        m = store.m[name]
        v = store.v[name]
        # in-place form of m = b1 m + (1-b1) g; v = b2 v + (1-b2) g^2;
        # p -= lr m_hat / (sqrt(v_hat) + eps), reusing one scratch buffer
        tmp = np.multiply(g, g)
        tmp *= 1.0 - beta2
        v *= beta2
        v += tmp
        g *= 1.0 - beta1
        m *= beta1
        m += g
        np.multiply(v, 1.0 / c2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += eps
        np.divide(m, tmp, out=tmp)
        tmp *= lr / c1
        p -= tmp
        g.fill(0.0)
    return norm


# ---------------------------------------------------------------------------
# Feed-forward networks

class Affine:
    def __init__(self, store: ParamStore, name: str, in_dim: int, out_dim: int,
                 rng: np.random.Generator | None = None, init_scale: float = 1.0):
        self.store = store
        self.wname = f"{name}.W"
        self.bname = f"{name}.b"
        self.in_dim = in_dim
        self.out_dim = out_dim
        if rng is None:
            W = np.zeros((out_dim, in_dim))
            b = np.zeros(out_dim)
        else:
            bound = 1.0 / math.sqrt(in_dim)
            W = rng.uniform(-bound, bound, (out_dim, in_dim)) * init_scale
            b = rng.uniform(-bound, bound, out_dim) * init_scale
        store.add(self.wname, W)
        store.add(self.bname, b)

    @property
    def W(self):
        return self.store[self.wname]

    @property
    def b(self):
        return self.store[self.bname]

    def forward(self, x):
        return affine_forward(self.W, self.b, x)

    def backward(self, x, dy, need_input_grad: bool = True):
        self.store.grads[self.wname] += dy.T @ x
        self.store.grads[self.bname] += dy.sum(axis=0)
        return dy @ self.W if need_input_grad else None


class MLP:
    """Affine layers with ELU between them (and optionally after the last)."""

    def __init__(self, store: ParamStore, name: str, sizes: Sequence[int],
                 rng: np.random.Generator | None = None, output_activation: bool = False,
                 output_scale: float = 1.0):
        if len(sizes) < 2:
            raise ConfigError("MLP needs at least input and output sizes")
        self.sizes = tuple(int(s) for s in sizes)
        self.output_activation = output_activation
        n = len(sizes) - 1
        self.layers = [
            Affine(store, f"{name}.{i}", sizes[i], sizes[i + 1], rng,
                   init_scale=output_scale if i == n - 1 else 1.0)
            for i in range(n)
        ]
        self._cache = None

    @property
    def in_dim(self):
        return self.sizes[0]

    @property
    def out_dim(self):
        return self.sizes[-1]

    def _activated(self, i):
        return i < len(self.layers) - 1 or self.output_activation

    def __call__(self, x):
        """Forward pass without recording (inference)."""
        h = np.asarray(x, dtype=np.float64)
        if h.shape[-1] != self.in_dim:
            raise ConfigError(f"network expects input dim {self.in_dim}, got {h.shape[-1]}")
        for i, layer in enumerate(self.layers):
            h = layer.forward(h)
            if self._activated(i):
                h = elu_apply(h)
        return h

    def forward(self, x):
        """Forward pass recording activations for :meth:`backward`."""
        h = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if h.shape[-1] != self.in_dim:
            raise ConfigError(f"network expects input dim {self.in_dim}, got {h.shape[-1]}")
        inputs, outs = [], []
        for i, layer in enumerate(self.layers):
            inputs.append(h)
            h = layer.forward(h)
            if self._activated(i):
                h = elu_apply(h)
            outs.append(h)
        self._cache = (inputs, outs)
        return h

    def backward(self, upstream, need_input_grad: bool = True):
        """Accumulate d(upstream . output)/d(params); return gradient w.r.t. the input.

        With ``need_input_grad=False`` the first layer skips the input
        gradient and ``None`` is returned.
        """
        if self._cache is None:
            raise UsageError("backward called without a recorded forward pass")
        inputs, outs = self._cache
        g = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
        if g.shape != outs[-1].shape:
            raise ConfigError(f"upstream shape {g.shape} != output shape {outs[-1].shape}")
        for i in reversed(range(len(self.layers))):
            if self._activated(i):
                g = g * _elu_grad_from_output(outs[i])
            g = self.layers[i].backward(inputs[i], g, need_input_grad or i > 0)
        self._cache = None
        return g

    def param_names(self):
        return [n for layer in self.layers for n in (layer.wname, layer.bname)]


def backprop_network(net: MLP, x, upstream):
    """Run a recorded forward pass and backpropagate ``upstream``; returns input gradient."""
    net.forward(x)
    return net.backward(upstream)


# ---------------------------------------------------------------------------
# LSTM

class LstmState:
    __slots__ = ("hidden", "cell")

    def __init__(self, hidden, cell):
        self.hidden = np.asarray(hidden, dtype=np.float64)
        self.cell = np.asarray(cell, dtype=np.float64)

    @classmethod
    def zeros(cls, hidden_size: int, batch: int | None = None):
        shape = (hidden_size,) if batch is None else (batch, hidden_size)
        return cls(np.zeros(shape), np.zeros(shape))

    def copy(self):
        return LstmState(self.hidden.copy(), self.cell.copy())


class LSTM:
    """Single-layer LSTM with gate order (input, forget, candidate, output).

    The input projection ``W_x x + b`` is separated from the recurrence so
    callers with structured inputs (e.g. one-hot) can supply it directly via
    :meth:`recur` / :meth:`recur_backward`.
    """

    def __init__(self, store: ParamStore, name: str, input_size: int, hidden_size: int,
                 readout_size: int | None = None, rng: np.random.Generator | None = None):
        self.store = store
        self.input_size = input_size
        self.hidden_size = H = hidden_size
        self.wx, self.wh, self.bname = f"{name}.W_x", f"{name}.W_h", f"{name}.b"
        if rng is None:
            store.add(self.wx, np.zeros((4 * H, input_size)))
            store.add(self.wh, np.zeros((4 * H, H)))
            store.add(self.bname, np.zeros(4 * H))
        else:
            bound = 1.0 / math.sqrt(H)
            store.add(self.wx, rng.uniform(-bound, bound, (4 * H, input_size)))
            store.add(self.wh, rng.uniform(-bound, bound, (4 * H, H)))
            store.add(self.bname, rng.uniform(-bound, bound, 4 * H))
        self.readout = None
        if readout_size is not None:
            self.readout = Affine(store, f"{name}.readout", H, readout_size, rng)
        self._cache = None

    def _check_state(self, state: LstmState):
        if state.hidden.shape[-1] != self.hidden_size or state.cell.shape != state.hidden.shape:
            raise ConfigError(f"LSTM state must have size {self.hidden_size}")

    def step(self, state: LstmState, x):
        """One cell update; returns ``(output, next_state)``.

        ``output`` is the readout of the new hidden state when a readout is
        configured, otherwise the hidden state itself.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_size:
            raise ConfigError(f"LSTM expects input dim {self.input_size}, got {x.shape[-1]}")
        self._check_state(state)
        H = self.hidden_size
        z = x @ self.store[self.wx].T + state.hidden @ self.store[self.wh].T + self.store[self.bname]
        i = sigmoid(z[..., :H])
        f = sigmoid(z[..., H:2 * H])
        g = np.tanh(z[..., 2 * H:3 * H])
        o = sigmoid(z[..., 3 * H:])
        c = f * state.cell + i * g
        h = o * np.tanh(c)
        out = self.readout.forward(h) if self.readout is not None else h
        return out, LstmState(h, c)

    # -- sequence API ------------------------------------------------------
    def input_projection(self, xs):
        return xs @ self.store[self.wx].T + self.store[self.bname]

    def recur(self, pre_x, state0: LstmState):
        """Run the recurrence over ``pre_x`` of shape (T, B, 4H); returns hidden (T, B, H)."""
        T, B, _ = pre_x.shape
        H = self.hidden_size
        Wh = self.store[self.wh]
        h = np.broadcast_to(state0.hidden, (B, H)).copy()
        c = np.broadcast_to(state0.cell, (B, H)).copy()
        hs = np.empty((T, B, H))
        cache = []
        for t in range(T):
            z = pre_x[t] + h @ Wh.T
            i = sigmoid(z[:, :H])
            f = sigmoid(z[:, H:2 * H])
            g = np.tanh(z[:, 2 * H:3 * H])
            o = sigmoid(z[:, 3 * H:])
            c_prev, h_prev = c, h
            c = f * c_prev + i * g
            tc = np.tanh(c)
            h = o * tc
            hs[t] = h
            cache.append((h_prev, c_prev, i, f, g, o, tc))
        self._cache = cache
        return hs, LstmState(h, c)

    def recur_backward(self, dhs, dh_final=None, dc_final=None):
        """Backpropagate through :meth:`recur`; returns (d_pre_x, dh0, dc0)."""
        if self._cache is None:
            raise UsageError("recur_backward called without a recorded recurrence")
        cache = self._cache
        T, B, H = dhs.shape
        Wh = self.store[self.wh]
        dWh = self.store.grads[self.wh]
        dpre = np.empty((T, B, 4 * H))
        dh_next = np.zeros((B, H)) if dh_final is None else np.array(dh_final, dtype=np.float64).reshape(B, H)
        dc_next = np.zeros((B, H)) if dc_final is None else np.array(dc_final, dtype=np.float64).reshape(B, H)
        for t in reversed(range(T)):
            h_prev, c_prev, i, f, g, o, tc = cache[t]
            dh = dhs[t] + dh_next
            do = dh * tc
            dc = dc_next + dh * o * (1.0 - tc * tc)
            di = dc * g
            dg = dc * i
            df = dc * c_prev
            dz = np.concatenate([di * i * (1 - i), df * f * (1 - f), dg * (1 - g * g), do * o * (1 - o)], axis=1)
            dpre[t] = dz
            dWh += dz.T @ h_prev
            dh_next = dz @ Wh
            dc_next = dc * f
        self._cache = None
        return dpre, dh_next, dc_next

    def forward(self, xs, state0: LstmState):
        """Dense sequence forward: xs (T, B, in) -> outputs (T, B, out), final state."""
        xs = np.asarray(xs, dtype=np.float64)
        if xs.shape[-1] != self.input_size:
            raise ConfigError(f"LSTM expects input dim {self.input_size}, got {xs.shape[-1]}")
        self._check_state(state0)
        pre = self.input_projection(xs)
        hs, final = self.recur(pre, state0)
        self._seq_cache = (xs, hs)
        out = hs
        if self.readout is not None:
            out = self.readout.forward(hs.reshape(-1, self.hidden_size)).reshape(hs.shape[0], hs.shape[1], -1)
        return out, final

    def backward(self, douts, dh_final=None, dc_final=None):
        """Backward for :meth:`forward`; returns (dxs, dh0, dc0)."""
        if getattr(self, "_seq_cache", None) is None:
            raise UsageError("backward called without a recorded forward pass")
        xs, hs = self._seq_cache
        T, B, H = hs.shape
        douts = np.asarray(douts, dtype=np.float64)
        if self.readout is not None:
            dh_flat = self.readout.backward(hs.reshape(-1, H), douts.reshape(T * B, -1))
            dhs = dh_flat.reshape(T, B, H)
        else:
            dhs = douts
        dpre, dh0, dc0 = self.recur_backward(dhs, dh_final, dc_final)
        flat = dpre.reshape(T * B, -1)
        self.store.grads[self.wx] += flat.T @ xs.reshape(T * B, -1)
        self.store.grads[self.bname] += flat.sum(axis=0)
        self._seq_cache = None
        return dpre @ self.store[self.wx], dh0, dc0


def lstm_step(cell: LSTM, state: LstmState, x):
    return cell.step(state, x)


# ---------------------------------------------------------------------------
# Finite-difference oracle

def finite_diff_check(store: ParamStore, loss: Callable[[], float],
                      loss_and_grad: Callable[[], float] | None = None,
                      h: float = 1e-5, max_entries: int = 10_000,
                      rng: np.random.Generator | None = None,
                      names: Sequence[str] | None = None, floor: float = 1e-8) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``floor`` bounds the denominator from below, so entries whose gradients
    are far below it are judged by absolute error instead.

    ``loss()`` evaluates the scalar loss at the store's current parameters.
    ``loss_and_grad()`` (defaults to ``loss``) must accumulate analytic
    gradients into ``store.grads`` starting from zero. When the selected
    parameters exceed ``max_entries`` a random subset of coordinates of that
    size is checked instead.
    """
    names = list(names) if names is not None else store.names()
    store.zero_grad()
    (loss_and_grad or loss)()
    analytic = {n: store.grads[n].copy() for n in names}
    store.zero_grad()

    coords = [(n, k) for n in names for k in range(store[n].size)]
    if len(coords) > max_entries:
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_entries, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    worst = 0.0
    for name, k in coords:
        flat = store[name].reshape(-1)
        orig = flat[k]
        flat[k] = orig + h
        up = loss()
        flat[k] = orig - h
        down = loss()
        flat[k] = orig
        g_fd = (up - down) / (2.0 * h)
        g_a = analytic[name].reshape(-1)[k]
        err = abs(g_a - g_fd) / max(floor, abs(g_a) + abs(g_fd))
        worst = max(worst, err)
    return worst
