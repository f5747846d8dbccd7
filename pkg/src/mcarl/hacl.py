"""History-aware command curriculum.

The command space (v_x, v_y, yaw rate) is cut into a 20 x 10 x 20 grid.
Bins inside an unlocked box around the origin carry sampling weights; an
LSTM reads the sequence of visited bins together with the rewards the
policy earned there and predicts, for every bin, the linear and angular
tracking reward it would get next. Predicted rewards are added to the bin
weights, so bins the policy is about to master get sampled more.

The LSTM input is ``[one-hot(bin), previous observed (r_lin, r_ang)]``.
Because the one-hot part selects a single column of the input matrix, the
input projection is formed by column lookup instead of a dense product.
"""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from .diffcore import LSTM, LstmState, ParamStore, adam_step, sigmoid
from .errors import ConfigError

log = logging.getLogger(__name__)

AXES = ("v_x", "v_y", "w_z")


@dataclass(frozen=True)
class BinGrid:
    counts: tuple = (20, 10, 20)
    low: tuple = (-6.0, -1.0, -5.0)
    high: tuple = (6.0, 1.0, 5.0)

    def __post_init__(self):
        if len(self.counts) != 3 or any(c < 1 for c in self.counts):
            raise ConfigError("bin grid needs three positive counts")
        if any(h <= l for l, h in zip(self.low, self.high)):
            raise ConfigError("bin grid ranges must have high > low")

    @property
    def size(self) -> int:
        return int(np.prod(self.counts))

    @property
    def width(self) -> np.ndarray:
        return (np.asarray(self.high) - np.asarray(self.low)) / np.asarray(self.counts)

    def cell_of(self, cmd):
        """Per-axis cell indices (clamped to the grid) and whether clamping happened."""
        cmd = np.asarray(cmd, dtype=np.float64)
        raw = np.floor((cmd - np.asarray(self.low)) / self.width).astype(np.int64)
        counts = np.asarray(self.counts)
        cells = np.clip(raw, 0, counts - 1)
        outside = np.any((cmd < np.asarray(self.low)) | (cmd > np.asarray(self.high)), axis=-1)
        return cells, outside

    def flat(self, cells):
        cells = np.asarray(cells, dtype=np.int64)
        nx, ny, nz = self.counts
        return (cells[..., 0] * ny + cells[..., 1]) * nz + cells[..., 2]

    def unflat(self, b):
        b = np.asarray(b, dtype=np.int64)
        nx, ny, nz = self.counts
        return np.stack([b // (ny * nz), (b // nz) % ny, b % nz], axis=-1)

    def center(self, b):
        return np.asarray(self.low) + (self.unflat(b) + 0.5) * self.width

    def cell_bounds(self, b):
        lo = np.asarray(self.low) + self.unflat(b) * self.width
        return lo, lo + self.width


def command_bin_index(grid: BinGrid, cmd):
    """Row-major bin id of one command (or an array of commands)."""
    cells, outside = grid.cell_of(cmd)
    if np.any(outside):
        log.warning("command outside curriculum grid; clamped to boundary bin")
    out = grid.flat(cells)
    return int(out) if np.ndim(out) == 0 else out


def bin_center(grid: BinGrid, b):
    return grid.center(b)


@dataclass
class CurriculumConfig:
    kind: str = "hacl"              # "hacl" or "fixed"
    initial_high: tuple = (1.0, 1.0, 1.0)  # half-widths of the initial box (cell centres inside)
    alpha: float = 0.2
    average_pair: bool = True       # 0.2 * (r_lin + r_ang) / 2; False gives alpha * (r_lin + r_ang)
    expand_threshold: float = 4.8   # 0.8 of the attainable 6.0
    seed_weight: float = 0.1
    min_face_visits: int = 4
    hidden: int = 128
    lr: float = 1e-3
    tbptt: int = 32
    replay_capacity: int = 1024
    train_chunks: int = 4           # TBPTT chunks per curriculum update
    init_weight: float = 1.0

    @classmethod
    def from_dict(cls, d: dict | None) -> "CurriculumConfig":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown curriculum fields: {sorted(unknown)}")
        if "initial_high" in d:
            d["initial_high"] = tuple(float(x) for x in d["initial_high"])
        cfg = cls(**d)
        if cfg.kind not in ("hacl", "fixed"):
            raise ConfigError(f"curriculum kind must be 'hacl' or 'fixed', got {cfg.kind!r}")
        return cfg

    def to_dict(self):
        return asdict(self)


class RewardPredictor:
    """LSTM over visit sequences with an 8000-wide readout (two values per bin)."""

    def __init__(self, n_bins: int, hidden: int = 128, rng: np.random.Generator | None = None):
        self.n_bins = n_bins
        self.store = ParamStore()
        self.lstm = LSTM(self.store, "rnn", n_bins + 2, hidden, readout_size=2 * n_bins, rng=rng)

    @property
    def hidden_size(self):
        return self.lstm.hidden_size

    def projection(self, bins, r_prev):
        """Input projection W_x [one-hot(bins), r_prev] + b, by column lookup."""
        Wx = self.store[self.lstm.wx]
        return Wx[:, bins].T + r_prev @ Wx[:, self.n_bins:].T + self.store[self.lstm.bname]

    def readout_pairs(self, h, bins):
        """Readout rows (2b, 2b+1) for each hidden row h[k] and bin bins[k]."""
        W = self.store[self.lstm.readout.wname]
        b = self.store[self.lstm.readout.bname]
        rows = np.stack([2 * bins, 2 * bins + 1], axis=-1)
        return np.einsum("kjh,kh->kj", W[rows], h) + b[rows]

    def full_readout(self, h):
        return self.lstm.readout.forward(h)

    def step(self, state: LstmState, b: int, r_prev):
        pre = self.projection(np.array([b]), np.atleast_2d(r_prev))[None]
        hs, nxt = self.lstm.recur(pre, LstmState(state.hidden[None], state.cell[None]))
        self.lstm._cache = None
        return hs[0, 0], LstmState(nxt.hidden[0], nxt.cell[0])

    def run(self, bins, r_prev, state0: LstmState):
        """Forward over a visit sequence (no gradient); returns final state."""
        if len(bins) == 0:
            return state0.copy()
        pre = self.projection(np.asarray(bins), np.asarray(r_prev))[:, None, :]
        _, final = self.lstm.recur(pre, LstmState(state0.hidden[None], state0.cell[None]))
        self.lstm._cache = None
        return LstmState(final.hidden[0], final.cell[0])

    def chunk_loss_and_grad(self, bins, r_prev, targets, state0: LstmState):
        """MSE over one chunk; accumulates gradients and returns (loss, final state)."""
        bins = np.asarray(bins, dtype=np.int64)
        T = len(bins)
        pre = self.projection(bins, r_prev)[:, None, :]
        hs, final = self.lstm.recur(pre, LstmState(state0.hidden[None], state0.cell[None]))
        h = hs[:, 0, :]
        pred = self.readout_pairs(h, bins)
        err = pred - targets
        loss = float(np.mean(err * err))
        dpred = 2.0 * err / err.size
        # readout rows (2b, 2b+1)
        W = self.store[self.lstm.readout.wname]
        gW = self.store.grads[self.lstm.readout.wname]
        gb = self.store.grads[self.lstm.readout.bname]
        rows = np.stack([2 * bins, 2 * bins + 1], axis=-1)
        np.add.at(gW, rows.reshape(-1), (dpred[:, :, None] * h[:, None, :]).reshape(-1, h.shape[1]))
        np.add.at(gb, rows.reshape(-1), dpred.reshape(-1))
        dh = np.einsum("kj,kjh->kh", dpred, W[rows])
        dpre, _, _ = self.lstm.recur_backward(dh[:, None, :])
        dpre = dpre[:, 0, :]
        gWx = self.store.grads[self.lstm.wx]
        np.add.at(gWx.T, bins, dpre)
        gWx[:, self.n_bins:] += dpre.T @ r_prev
        self.store.grads[self.lstm.bname] += dpre.sum(axis=0)
        return loss, LstmState(final.hidden[0], final.cell[0])


@dataclass
class CurriculumState:
    grid: BinGrid
    cfg: CurriculumConfig
    weights: np.ndarray
    box: np.ndarray                    # (3, 2) inclusive cell ranges of the unlocked box
    predictor: RewardPredictor | None
    hidden: LstmState | None
    last_reward: np.ndarray = field(default_factory=lambda: np.zeros(2))
    replay: deque = field(default_factory=deque)
    visit_count: np.ndarray | None = None
    visit_sum: np.ndarray | None = None   # observed r_lin + r_ang summed per bin
    last_loss: float = float("nan")

    @property
    def active_mask(self) -> np.ndarray:
        cells = self.grid.unflat(np.arange(self.grid.size))
        inside = (cells >= self.box[:, 0]) & (cells <= self.box[:, 1])
        return np.all(inside, axis=1)

    @property
    def active_bins(self) -> np.ndarray:
        return np.flatnonzero(self.active_mask)

    def probabilities(self) -> np.ndarray:
        w = np.where(self.active_mask, self.weights, 0.0)
        return w / w.sum()

    def weight_entropy(self) -> float:
        p = self.probabilities()
        p = p[p > 0]
        return float(-np.sum(p * np.log(p)))


def initial_box(grid: BinGrid, half_widths) -> np.ndarray:
    """Cells whose centres lie within +-half_widths on each axis."""
    box = np.zeros((3, 2), dtype=np.int64)
    for k in range(3):
        centers = grid.low[k] + (np.arange(grid.counts[k]) + 0.5) * grid.width[k]
        inside = np.flatnonzero(np.abs(centers) <= half_widths[k] + 1e-9)
        if inside.size == 0:
            inside = np.array([np.argmin(np.abs(centers))])
        box[k] = inside[0], inside[-1]
    return box


def make_curriculum(cfg: CurriculumConfig | None = None, grid: BinGrid | None = None,
                    rng: np.random.Generator | None = None) -> CurriculumState:
    cfg = cfg or CurriculumConfig()
    grid = grid or BinGrid()
    box = initial_box(grid, cfg.initial_high)
    state = CurriculumState(grid=grid, cfg=cfg, weights=np.zeros(grid.size), box=box,
                            predictor=None, hidden=None,
                            replay=deque(maxlen=cfg.replay_capacity),
                            visit_count=np.zeros(grid.size, dtype=np.int64),
                            visit_sum=np.zeros(grid.size))
    state.weights[state.active_mask] = cfg.init_weight
    if cfg.kind == "hacl":
        state.predictor = RewardPredictor(grid.size, cfg.hidden, rng)
        state.hidden = LstmState.zeros(cfg.hidden)
    return state


# ---------------------------------------------------------------------------
# Prediction and training

def rnn_predict_bin_rewards(state: CurriculumState, b: int, advance: bool = True):
    """Predicted (r_lin, r_ang) for bin ``b``; advances the hidden state by default."""
    h, nxt = state.predictor.step(state.hidden, int(b), state.last_reward)
    out = state.predictor.full_readout(h[None])[0]
    if advance:
        state.hidden = nxt
    return float(out[2 * b]), float(out[2 * b + 1]), out


def predict_bins(state: CurriculumState, bins) -> np.ndarray:
    """One-step-ahead predictions for many bins from the current hidden state (no advance)."""
    bins = np.asarray(bins, dtype=np.int64)
    pred = state.predictor
    H = pred.hidden_size
    pre = pred.projection(bins, np.tile(state.last_reward, (len(bins), 1)))
    z = pre + state.hidden.hidden @ pred.store[pred.lstm.wh].T
    i, f, g, o = sigmoid(z[:, :H]), sigmoid(z[:, H:2 * H]), np.tanh(z[:, 2 * H:3 * H]), sigmoid(z[:, 3 * H:])
    c = f * state.hidden.cell + i * g
    h = o * np.tanh(c)
    return pred.readout_pairs(h, bins)


def train_rnn_predictor(state: CurriculumState, replay=None, max_chunks: int | None = None,
                        lr: float | None = None) -> float:
    """TBPTT over the replay (visit order); returns the mean chunk loss.

    ``replay`` is a sequence of ``(bin, r_lin, r_ang)``; when omitted, the
    curriculum's own replay is used. The most recent ``max_chunks`` chunks
    are trained on; the hidden state is carried (without gradient) from the
    start of the replay.
    """
    replay = list(state.replay if replay is None else replay)
    if not replay:
        raise ConfigError("train_rnn_predictor needs a non-empty replay")
    pred = state.predictor
    bins = np.array([int(v[0]) for v in replay], dtype=np.int64)
    targets = np.array([(v[1], v[2]) for v in replay], dtype=np.float64)
    r_prev = np.vstack([np.zeros((1, 2)), targets[:-1]])
    T = state.cfg.tbptt
    starts = list(range(0, len(bins), T))
    first = 0 if max_chunks is None else max(0, len(starts) - max_chunks)
    h = pred.run(bins[:starts[first]], r_prev[:starts[first]], LstmState.zeros(pred.hidden_size))
    losses = []
    for s in starts[first:]:
        sl = slice(s, s + T)
        pred.store.zero_grad()
        loss, h_next = pred.chunk_loss_and_grad(bins[sl], r_prev[sl], targets[sl], h)
        adam_step(pred.store, state.cfg.lr if lr is None else lr, max_grad_norm=None)
        # carry the state forward under the updated weights, detached
        h = pred.run(bins[sl], r_prev[sl], h)
        losses.append(loss)
    state.last_loss = float(np.mean(losses))
    return state.last_loss


def refresh_hidden(state: CurriculumState):
    """Recompute the live hidden state by replaying the visit history."""
    replay = list(state.replay)
    pred = state.predictor
    if not replay:
        state.hidden = LstmState.zeros(pred.hidden_size)
        state.last_reward = np.zeros(2)
        return
    bins = np.array([int(v[0]) for v in replay], dtype=np.int64)
    targets = np.array([(v[1], v[2]) for v in replay], dtype=np.float64)
    r_prev = np.vstack([np.zeros((1, 2)), targets[:-1]])
    state.hidden = pred.run(bins, r_prev, LstmState.zeros(pred.hidden_size))
    state.last_reward = targets[-1].copy()


# ---------------------------------------------------------------------------
# Weights, frontier and sampling

def update_bin_weights(state: CurriculumState, predictions, alpha: float | None = None, bins=None):
    """``w <- max(0, w + alpha * (r_lin + r_ang) [/ 2])`` on active bins."""
    alpha = state.cfg.alpha if alpha is None else alpha
    bins = state.active_bins if bins is None else np.asarray(bins, dtype=np.int64)
    pred = np.asarray(predictions, dtype=np.float64).reshape(len(bins), 2)
    gain = pred.sum(axis=1)
    if state.cfg.average_pair:
        gain = gain / 2.0
    state.weights[bins] = np.maximum(0.0, state.weights[bins] + alpha * gain)
    state.weights[~state.active_mask] = 0.0
    if state.weights[state.active_mask].sum() <= 0.0:
        log.warning("all active curriculum weights reached zero; resetting to uniform")
        state.weights[state.active_mask] = state.cfg.init_weight
    return state.weights


def face_bins(state: CurriculumState, axis: int, side: int) -> np.ndarray:
    cells = state.grid.unflat(np.arange(state.grid.size))
    on_face = state.active_mask & (cells[:, axis] == state.box[axis, side])
    return np.flatnonzero(on_face)


def expand_frontier(state: CurriculumState) -> list:
    """Unlock one more cell layer on every face whose visited bins average above threshold."""
    grown = []
    for axis in range(3):
        for side, step in ((0, -1), (1, 1)):
            edge = state.box[axis, side]
            target = edge + step
            if target < 0 or target >= state.grid.counts[axis]:
                continue
            bins = face_bins(state, axis, side)
            visited = bins[state.visit_count[bins] > 0]
            if state.visit_count[bins].sum() < state.cfg.min_face_visits or visited.size == 0:
                continue
            mean = float(np.sum(state.visit_sum[visited]) / np.sum(state.visit_count[visited]))
            if mean > state.cfg.expand_threshold:
                before = state.active_mask
                state.box[axis, side] = target
                new = state.active_mask & ~before
                state.weights[new] = state.cfg.seed_weight
                grown.append((AXES[axis], "low" if side == 0 else "high"))
    return grown


def sample_command_from_bins(state: CurriculumState, rng: np.random.Generator, n: int | None = None):
    """Draw bins with probability w / sum(w) over active bins and a uniform command inside each."""
    p = state.probabilities()
    k = 1 if n is None else n
    bins = rng.choice(state.grid.size, size=k, p=p)
    lo, hi = state.grid.cell_bounds(bins)
    cmds = lo + rng.random((k, 3)) * (hi - lo)
    if n is None:
        return cmds[0], int(bins[0])
    return cmds, bins


def record_visits(state: CurriculumState, visits):
    """Append completed-episode visits ``(bin, r_lin, r_ang)`` in order."""
    for b, r_lin, r_ang in visits:
        b = int(b)
        state.visit_count[b] += 1
        state.visit_sum[b] += r_lin + r_ang
        state.replay.append((b, float(r_lin), float(r_ang)))
        if state.predictor is not None:
            _, state.hidden = state.predictor.step(state.hidden, b, state.last_reward)
        state.last_reward = np.array([r_lin, r_ang], dtype=np.float64)


def curriculum_update(state: CurriculumState, visits) -> dict:
    """Between-rollout update: record visits, train predictor, reweight, expand."""
    record_visits(state, visits)
    stats = {}
    if state.cfg.kind == "hacl" and len(state.replay) > 0:
        stats["rnn_loss"] = train_rnn_predictor(state, max_chunks=state.cfg.train_chunks)
        refresh_hidden(state)
        bins = state.active_bins
        update_bin_weights(state, predict_bins(state, bins), bins=bins)
    grown = expand_frontier(state)
    if state.cfg.kind == "fixed":
        state.weights[state.active_mask] = state.cfg.init_weight
    stats.update(active_bins=int(state.active_mask.sum()), weight_entropy=state.weight_entropy(),
                 expanded=len(grown))
    return stats


def state_arrays(state: CurriculumState) -> dict:
    out = {
        "curriculum.weights": state.weights, "curriculum.box": state.box,
        "curriculum.last_reward": state.last_reward,
        "curriculum.visit_count": state.visit_count, "curriculum.visit_sum": state.visit_sum,
        "curriculum.replay": np.array(list(state.replay), dtype=np.float64).reshape(-1, 3),
    }
    if state.predictor is not None:
        out.update(state.predictor.store.state_arrays("curriculum.rnn"))
        out["curriculum.hidden"] = state.hidden.hidden
        out["curriculum.cell"] = state.hidden.cell
    return out


def load_state_arrays(state: CurriculumState, arrays: dict):
    state.weights = np.array(arrays["curriculum.weights"])
    state.box = np.array(arrays["curriculum.box"]).astype(np.int64)
    state.last_reward = np.array(arrays["curriculum.last_reward"])
    state.visit_count = np.array(arrays["curriculum.visit_count"]).astype(np.int64)
    state.visit_sum = np.array(arrays["curriculum.visit_sum"])
    state.replay = deque(((int(r[0]), float(r[1]), float(r[2])) for r in arrays["curriculum.replay"]),
                         maxlen=state.cfg.replay_capacity)
    if state.predictor is not None:
        state.predictor.store.load_state_arrays("curriculum.rnn", arrays)
        state.hidden = LstmState(np.array(arrays["curriculum.hidden"]), np.array(arrays["curriculum.cell"]))
