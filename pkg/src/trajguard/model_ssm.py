"""Weight-trajectory forecaster: bidirectional GRU plus a linear head.

Each sequence element is a whole flattened GM snapshot. The forward cell reads
W_0..W_t, the backward cell reads W_t..W_0, both from a zero state; the two
final hidden states are concatenated and projected back to GM dimensionality.

Training pairs are every prefix of the history paired with the snapshot that
follows it. All prefixes of a mini-batch are scanned together with a step mask,
and gate input projections ``X @ W_x.T`` are computed once per snapshot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (ConfigError, EmptySequence, InsufficientHistory, LengthMismatch,
                     ShapeMismatch)
from .model_gm import AdamState, adam_step
from .numeric import FlatWeights, as_vector, make_rng

GATES = ("R", "Z", "H")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class GruCell:
    """Gate weights act on ``[h_prev, x]``; columns ``:hidden`` multiply h_prev."""

    W_R: np.ndarray
    W_Z: np.ndarray
    W_H: np.ndarray
    B_R: np.ndarray
    B_Z: np.ndarray
    B_H: np.ndarray

    @property
    def hidden(self) -> int:
        return self.B_R.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_R.shape[1] - self.hidden

    def check(self) -> None:
        h = self.hidden
        for name in ("W_R", "W_Z", "W_H"):
            W = getattr(self, name)
            if W.ndim != 2 or W.shape[0] != h or W.shape[1] <= h:
                raise ShapeMismatch(f"{name} has shape {W.shape}; need ({h}, {h}+input)")
            if W.shape != self.W_R.shape:
                raise ShapeMismatch("gate matrices differ in shape")
        for name in ("B_Z", "B_H"):
            if getattr(self, name).shape != (h,):
                raise ShapeMismatch(f"{name} must have length {h}")

    @classmethod
    def zeros(cls, hidden: int, input_dim: int) -> "GruCell":
        z = lambda: np.zeros((hidden, hidden + input_dim))
        return cls(z(), z(), z(), np.zeros(hidden), np.zeros(hidden), np.zeros(hidden))

    @classmethod
    def glorot(cls, hidden: int, input_dim: int, rng) -> "GruCell":
        limit = np.sqrt(6.0 / (2 * hidden + input_dim))
        w = lambda: rng.uniform(-limit, limit, (hidden, hidden + input_dim))
        return cls(w(), w(), w(), np.zeros(hidden), np.zeros(hidden), np.zeros(hidden))


@dataclass
class SsmParams:
    forward_cell: GruCell
    backward_cell: GruCell
    W_P: np.ndarray
    B_P: np.ndarray

    @property
    def hidden(self) -> int:
        return self.forward_cell.hidden

    @property
    def input_dim(self) -> int:
        return self.forward_cell.input_dim

    def layout(self):
        h, d = self.hidden, self.input_dim
        out = []
        for prefix in ("fwd", "bwd"):
            out += [(f"{prefix}.W_{g}", (h, h + d)) for g in GATES]
            out += [(f"{prefix}.B_{g}", (h,)) for g in GATES]
        out += [("W_P", (d, 2 * h)), ("B_P", (d,))]
        return out

    def to_flat(self) -> FlatWeights:
        parts = []
        for cell in (self.forward_cell, self.backward_cell):
            parts += [cell.W_R, cell.W_Z, cell.W_H, cell.B_R, cell.B_Z, cell.B_H]
        parts += [self.W_P, self.B_P]
        return FlatWeights(np.concatenate([p.reshape(-1) for p in parts]), self.layout())

    @classmethod
    def from_flat(cls, flat, hidden: int, input_dim: int) -> "SsmParams":
        v = as_vector(flat)
        h, d = hidden, input_dim
        need = 2 * (3 * h * (h + d) + 3 * h) + d * 2 * h + d
        if v.size != need:
            raise LengthMismatch(f"flat SSM vector has {v.size} entries, need {need}")
        off = 0

        def take(shape):
            nonlocal off
            n = int(np.prod(shape))
            out = v[off:off + n].reshape(shape).copy()
            off += n
            return out

        cells = []
        for _ in range(2):
            Ws = [take((h, h + d)) for _ in GATES]
            Bs = [take((h,)) for _ in GATES]
            cells.append(GruCell(*Ws, *Bs))
        W_P = take((d, 2 * h))
        B_P = take((d,))
        return cls(cells[0], cells[1], W_P, B_P)

    def param_count(self) -> int:
        return self.to_flat().values.size


def ssm_param_count(hidden: int, input_dim: int) -> int:
    return 2 * (3 * hidden * (hidden + input_dim) + 3 * hidden) + input_dim * 2 * hidden + input_dim


@dataclass(frozen=True)
class SsmConfig:
    hidden: int = 4
    epochs: int = 20
    lr: float = 0.01
    batch_size: int = 8
    update_epochs: int = 2
    update_lr: float = 0.01
    window: int = 32
    candidate: str = "tanh"
    ssm_input: str = "weights"
    bias_init: str = "target_mean"
    seed: int = 0

    def validate(self) -> None:
        if self.hidden < 1:
            raise ConfigError("ssm hidden must be >= 1")
        if self.epochs < 1 or self.update_epochs < 0:
            raise ConfigError("ssm epochs must be >= 1 and update_epochs >= 0")
        if self.batch_size < 1:
            raise ConfigError("ssm batch_size must be >= 1")
        if self.window < 2:
            raise ConfigError("history window must be >= 2 to form a training pair")
        if self.candidate not in ("tanh", "relu"):
            raise ConfigError(f"unknown candidate activation {self.candidate!r}")
        if self.ssm_input not in ("weights", "diffs"):
            raise ConfigError(f"unknown ssm_input {self.ssm_input!r}")
        if self.bias_init not in ("zeros", "target_mean"):
            raise ConfigError(f"unknown bias_init {self.bias_init!r}")


class GmHistory:
    """Sliding window over the most recent GM snapshots."""

    def __init__(self, snapshots=(), window: int | None = 32):
        if window is not None and window < 2:
            raise ConfigError("history window must be >= 2")
        self.window = window
        self._snaps: list[np.ndarray] = []
        self.layout = None
        for s in snapshots:
            self.append(s)

    def append(self, w) -> None:
        v = as_vector(w).copy()
        if self._snaps and v.size != self._snaps[0].size:
            raise LengthMismatch(f"snapshot length {v.size} != history length {self._snaps[0].size}")
        if isinstance(w, FlatWeights) and self.layout is None:
            self.layout = w.layout
        self._snaps.append(v)
        if self.window is not None and len(self._snaps) > self.window:
            self._snaps.pop(0)

    def copy(self) -> "GmHistory":
        h = GmHistory(window=self.window)
        h._snaps = [s.copy() for s in self._snaps]
        h.layout = self.layout
        return h

    @property
    def snapshots(self) -> list[np.ndarray]:
        return list(self._snaps)

    @property
    def dim(self) -> int:
        return self._snaps[0].size if self._snaps else 0

    def matrix(self) -> np.ndarray:
        return np.vstack(self._snaps)

    def __len__(self) -> int:
        return len(self._snaps)

    def __getitem__(self, i) -> np.ndarray:
        return self._snaps[i]


# --- single-step cell ------------------------------------------------------

def _activate(a, candidate):
    return np.tanh(a) if candidate == "tanh" else np.maximum(a, 0.0)


def gru_cell_forward(cell: GruCell, h_prev, x, candidate: str = "tanh"):
    """One GRU step on a single (h_prev, x) pair. Returns (h, cache)."""
    h_prev = np.asarray(h_prev, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if h_prev.shape != (cell.hidden,) or x.shape != (cell.input_dim,):
        raise ShapeMismatch(
            f"cell expects h of shape ({cell.hidden},) and x of shape ({cell.input_dim},)")
    hx = np.concatenate([h_prev, x])
    r = sigmoid(cell.W_R @ hx + cell.B_R)
    z = sigmoid(cell.W_Z @ hx + cell.B_Z)
    a_h = cell.W_H @ np.concatenate([r * h_prev, x]) + cell.B_H
    c = _activate(a_h, candidate)
    h = (1.0 - z) * h_prev + z * c
    return h, {"r": r, "z": z, "candidate": c, "h_prev": h_prev, "x": x}


# --- masked batched scan ---------------------------------------------------

def _scan_forward(cell: GruCell, gx, idx, mask, candidate):
    """Run ``cell`` over steps; ``gx`` holds per-snapshot input projections."""
    hd = cell.hidden
    Wr, Wz, Wh = cell.W_R[:, :hd], cell.W_Z[:, :hd], cell.W_H[:, :hd]
    Gr, Gz, Gh = gx
    h = np.zeros((idx.shape[1], hd))
    caches = []
    for s in range(idx.shape[0]):
        rows = idx[s]
        m = mask[s][:, None]
        r = sigmoid(h @ Wr.T + Gr[rows] + cell.B_R)
        z = sigmoid(h @ Wz.T + Gz[rows] + cell.B_Z)
        rh = r * h
        a_h = rh @ Wh.T + Gh[rows] + cell.B_H
        c = _activate(a_h, candidate)
        h_new = (1.0 - z) * h + z * c
        caches.append((h, r, z, rh, c, a_h, rows, m))
        h = m * h_new + (1.0 - m) * h
    return h, caches


def _scan_backward(cell: GruCell, caches, dh, n_rows, candidate):
    hd = cell.hidden
    Wr, Wz, Wh = cell.W_R[:, :hd], cell.W_Z[:, :hd], cell.W_H[:, :hd]
    dWr, dWz, dWh = np.zeros_like(Wr), np.zeros_like(Wz), np.zeros_like(Wh)
    dBr, dBz, dBh = np.zeros(hd), np.zeros(hd), np.zeros(hd)
    dGr, dGz, dGh = np.zeros((n_rows, hd)), np.zeros((n_rows, hd)), np.zeros((n_rows, hd))
    for h, r, z, rh, c, a_h, rows, m in reversed(caches):
        dnew = dh * m
        dprev = dh * (1.0 - m) + dnew * (1.0 - z)
        dz = dnew * (c - h)
        dc = dnew * z
        da_h = dc * (1.0 - c * c) if candidate == "tanh" else dc * (a_h > 0)
        dWh += da_h.T @ rh
        dBh += da_h.sum(axis=0)
        np.add.at(dGh, rows, da_h)
        drh = da_h @ Wh
        dprev += drh * r
        da_r = drh * h * r * (1.0 - r)
        da_z = dz * z * (1.0 - z)
        dWz += da_z.T @ h
        dBz += da_z.sum(axis=0)
        np.add.at(dGz, rows, da_z)
        dprev += da_z @ Wz
        dWr += da_r.T @ h
        dBr += da_r.sum(axis=0)
        np.add.at(dGr, rows, da_r)
        dprev += da_r @ Wr
        dh = dprev
    return (dWr, dWz, dWh), (dBr, dBz, dBh), (dGr, dGz, dGh)


def _input_projections(cell: GruCell, X):
    hd = cell.hidden
    return tuple(X @ W[:, hd:].T for W in (cell.W_R, cell.W_Z, cell.W_H))


def _prefix_indices(ends: np.ndarray):
    """Step-major index/mask arrays for prefixes ``0..t`` read forward and backward."""
    L = int(ends.max()) + 1
    steps = np.arange(L)[:, None]
    mask = (steps <= ends[None, :]).astype(np.float64)
    fwd = np.minimum(steps, ends[None, :])
    bwd = np.maximum(ends[None, :] - steps, 0)
    return fwd, bwd, mask


def _encode(params: SsmParams, X, ends, candidate):
    fwd_idx, bwd_idx, mask = _prefix_indices(ends)
    gf = _input_projections(params.forward_cell, X)
    gb = _input_projections(params.backward_cell, X)
    hf, cf = _scan_forward(params.forward_cell, gf, fwd_idx, mask, candidate)
    hb, cb = _scan_forward(params.backward_cell, gb, bwd_idx, mask, candidate)
    return np.hstack([hf, hb]), (cf, cb)


def bigru_forward(params: SsmParams, sequence, candidate: str = "tanh") -> np.ndarray:
    """Concatenated final hidden states (forward, backward) for one sequence."""
    X = np.atleast_2d(np.asarray(sequence, dtype=np.float64))
    if len(sequence) == 0:
        raise EmptySequence("bigru_forward needs at least one element")
    if X.shape[1] != params.input_dim:
        raise ShapeMismatch(f"sequence width {X.shape[1]} != SSM input {params.input_dim}")
    H, _ = _encode(params, X, np.array([X.shape[0] - 1]), candidate)
    return H[0]


def fc_project(params: SsmParams, h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != params.W_P.shape[1]:
        raise ShapeMismatch(f"hidden width {h.shape[-1]} != projection input {params.W_P.shape[1]}")
    return h @ params.W_P.T + params.B_P


def _series(history_matrix: np.ndarray, ssm_input: str) -> np.ndarray:
    return history_matrix if ssm_input == "weights" else np.diff(history_matrix, axis=0)


def ssm_loss_and_grad(params: SsmParams, series: np.ndarray, ends, candidate: str = "tanh"):
    """MSE over pairs (prefix ``series[0..t]`` -> ``series[t+1]``) for t in ``ends``.

    Returns (loss, flat gradient in ``params.to_flat()`` order).
    """
    ends = np.asarray(ends, dtype=np.int64)
    X = series
    H, (cf, cb) = _encode(params, X, ends, candidate)
    P = H @ params.W_P.T + params.B_P
    Y = X[ends + 1]
    err = P - Y
    loss = float(np.mean(err * err))
    dP = 2.0 * err / err.size
    dW_P = dP.T @ H
    dB_P = dP.sum(axis=0)
    dH = dP @ params.W_P
    hd = params.hidden
    parts = []
    for cell, caches, dh in ((params.forward_cell, cf, dH[:, :hd]),
                             (params.backward_cell, cb, dH[:, hd:])):
        dWh_parts, dBs, dGs = _scan_backward(cell, caches, dh, X.shape[0], candidate)
        dWs = [np.hstack([dWh, dG.T @ X]) for dWh, dG in zip(dWh_parts, dGs)]
        parts += [*dWs, *dBs]
    parts += [dW_P, dB_P]
    return loss, np.concatenate([p.reshape(-1) for p in parts])


def init_ssm(input_dim: int, cfg: SsmConfig, targets: np.ndarray | None = None) -> SsmParams:
    rng = make_rng(cfg.seed, "ssm-init")
    fwd = GruCell.glorot(cfg.hidden, input_dim, rng)
    bwd = GruCell.glorot(cfg.hidden, input_dim, rng)
    limit = np.sqrt(6.0 / (input_dim + 2 * cfg.hidden))
    W_P = rng.uniform(-limit, limit, (input_dim, 2 * cfg.hidden))
    if cfg.bias_init == "target_mean" and targets is not None and len(targets):
        B_P = np.mean(targets, axis=0)
    else:
        B_P = np.zeros(input_dim)
    return SsmParams(fwd, bwd, W_P, B_P)


def _fit(params: SsmParams, series: np.ndarray, cfg: SsmConfig, epochs: int, lr: float,
         stream) -> tuple[SsmParams, list[float]]:
    n_pairs = series.shape[0] - 1
    flat = params.to_flat().values.copy()
    hidden, dim = params.hidden, params.input_dim
    state = AdamState.zeros(flat.size, lr=lr)
    losses = []
    for epoch in range(epochs):
        order = make_rng(cfg.seed, *stream, "ssm-shuffle", epoch).permutation(n_pairs)
        total = 0.0
        for start in range(0, n_pairs, cfg.batch_size):
            ends = np.sort(order[start:start + cfg.batch_size])
            p = SsmParams.from_flat(flat, hidden, dim)
            loss, g = ssm_loss_and_grad(p, series, ends, cfg.candidate)
            total += loss * ends.size
            state, flat = adam_step(state, flat, g)
        losses.append(total / n_pairs)
    return SsmParams.from_flat(flat, hidden, dim), losses


def _min_len(cfg: SsmConfig) -> int:
    return 2 if cfg.ssm_input == "weights" else 3


def train_ssm(history: GmHistory, cfg: SsmConfig = SsmConfig(), return_losses: bool = False):
    """Fit a fresh SSM on every (prefix -> next snapshot) pair of ``history``."""
    cfg.validate()
    if len(history) < _min_len(cfg):
        raise InsufficientHistory(
            f"need at least {_min_len(cfg)} snapshots to train, have {len(history)}")
    series = _series(history.matrix(), cfg.ssm_input)
    params = init_ssm(series.shape[1], cfg, series[1:])
    params, losses = _fit(params, series, cfg, cfg.epochs, cfg.lr, ("train",))
    return (params, losses) if return_losses else params


def project_next(ssm: SsmParams, history: GmHistory, cfg: SsmConfig = SsmConfig()) -> np.ndarray:
    """Projected next GM weights from the whole (windowed) history."""
    if len(history) == 0:
        raise InsufficientHistory("cannot project from an empty history")
    X = history.matrix()
    if X.shape[1] != ssm.input_dim and cfg.ssm_input == "weights":
        raise LengthMismatch(f"history width {X.shape[1]} != SSM input {ssm.input_dim}")
    if cfg.ssm_input == "weights":
        return fc_project(ssm, bigru_forward(ssm, X, cfg.candidate))
    if len(history) < 2:
        return X[-1].copy()
    step = fc_project(ssm, bigru_forward(ssm, np.diff(X, axis=0), cfg.candidate))
    return X[-1] + step


def update_ssm(ssm: SsmParams, history: GmHistory, new_gm, cfg: SsmConfig = SsmConfig(),
               round_index: int = 0) -> tuple[SsmParams, GmHistory]:
    """Append ``new_gm`` to a copy of the history and fine-tune the SSM on it."""
    cfg.validate()
    v = as_vector(new_gm)
    if v.size != history.dim:
        raise LengthMismatch(f"new GM length {v.size} != history length {history.dim}")
    hist = history.copy()
    hist.window = cfg.window
    hist.append(v)
    while len(hist) > cfg.window:
        hist._snaps.pop(0)
    if cfg.update_epochs == 0 or len(hist) < _min_len(cfg):
        return ssm, hist
    series = _series(hist.matrix(), cfg.ssm_input)
    new, _ = _fit(ssm, series, cfg, cfg.update_epochs, cfg.update_lr, ("update", round_index))
    return new, hist
