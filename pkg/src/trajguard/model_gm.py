"""Global model: a dense ReLU classifier over normalized RSS vectors.

Forward/backward passes, Adam and the training loops are written directly
in numpy so the flat parameter vector stays the single source of truth.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .aggregation import LocalUpdate
from .errors import ConfigError, DimMismatch, EmptyData, LengthMismatch
from .numeric import FlatWeights, Layout, as_vector, make_rng


@dataclass(frozen=True)
class MlpArchitecture:
    input_dim: int = 20
    hidden_dims: tuple[int, ...] = (16, 8)
    output_dim: int = 20
    dropout_rate: float = 0.15
    noise_sigma: float = 0.15

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if min((self.input_dim, self.output_dim, *self.hidden_dims)) < 1:
            raise ConfigError("all layer sizes must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")

    @property
    def sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.output_dim]

    def layout(self) -> Layout:
        out: Layout = []
        s = self.sizes
        for i in range(len(s) - 1):
            out.append((f"dense{i}.W", (s[i], s[i + 1])))
            out.append((f"dense{i}.b", (s[i + 1],)))
        return out

    def param_count(self) -> int:
        s = self.sizes
        return sum(s[i] * s[i + 1] + s[i + 1] for i in range(len(s) - 1))


def large_architecture(output_dim: int) -> MlpArchitecture:
    """350-256-128-R preset with 0.15 dropout and input noise."""
    return MlpArchitecture(350, (256, 128), output_dim, 0.15, 0.15)


def init_weights(arch: MlpArchitecture, seed: int) -> FlatWeights:
    """Glorot-uniform kernels, zero biases."""
    rng = make_rng(seed, "gm-init")
    parts = []
    for name, shape in arch.layout():
        if name.endswith(".W"):
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            parts.append(rng.uniform(-limit, limit, shape).reshape(-1))
        else:
            parts.append(np.zeros(shape[0]))
    return FlatWeights(np.concatenate(parts), arch.layout())


def _layers(w, arch: MlpArchitecture) -> list[tuple[np.ndarray, np.ndarray]]:
    v = as_vector(w)
    if v.size != arch.param_count():
        raise DimMismatch(f"weights have {v.size} entries, architecture needs {arch.param_count()}")
    out, off = [], 0
    s = arch.sizes
    for i in range(len(s) - 1):
        n_in, n_out = s[i], s[i + 1]
        W = v[off:off + n_in * n_out].reshape(n_in, n_out)
        off += n_in * n_out
        b = v[off:off + n_out]
        off += n_out
        out.append((W, b))
    return out


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _as_batch(x, arch: MlpArchitecture) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = x.reshape(1, -1) if single else x
    if x.ndim != 2 or x.shape[1] != arch.input_dim:
        raise DimMismatch(f"expected inputs of width {arch.input_dim}, got shape {x.shape}")
    return x, single


def _forward(layers, arch, x, rng):
    """Returns probabilities plus the activations/masks needed for backprop."""
    if rng is not None and arch.noise_sigma > 0:
        x = x + rng.normal(0.0, arch.noise_sigma, x.shape)
    acts, masks = [x], []
    a = x
    for W, b in layers[:-1]:
        a = np.maximum(a @ W + b, 0.0)
        if rng is not None and arch.dropout_rate > 0:
            keep = 1.0 - arch.dropout_rate
            m = (rng.random(a.shape) < keep) / keep
            a = a * m
        else:
            m = None
        masks.append(m)
        acts.append(a)
    W, b = layers[-1]
    return _softmax(a @ W + b), acts, masks


def forward(w, arch: MlpArchitecture, x, train: bool = False, rng=None) -> np.ndarray:
    """Class probabilities for one input vector or a batch.

    In train mode Gaussian input noise and inverted dropout are drawn from
    ``rng``; infer mode ignores ``rng`` entirely.
    """
    xb, single = _as_batch(x, arch)
    if train and rng is None:
        raise ValueError("train mode needs an rng")
    probs, _, _ = _forward(_layers(w, arch), arch, xb, rng if train else None)
    return probs[0] if single else probs


def loss_and_grad(w, arch: MlpArchitecture, x, y, rng=None) -> tuple[float, np.ndarray]:
    """Mean sparse categorical cross-entropy and its gradient w.r.t. ``w``.

    Stochastic layers are active only when ``rng`` is given.
    """
    xb, _ = _as_batch(x, arch)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if xb.shape[0] == 0:
        raise EmptyData("empty batch")
    if y.size != xb.shape[0]:
        raise DimMismatch("labels and inputs differ in length")
    if y.min() < 0 or y.max() >= arch.output_dim:
        raise DimMismatch(f"labels must lie in [0, {arch.output_dim})")
    layers = _layers(w, arch)
    probs, acts, masks = _forward(layers, arch, xb, rng)
    n = xb.shape[0]
    rows = np.arange(n)
    loss = float(-np.mean(np.log(np.maximum(probs[rows, y], 1e-300))))

    delta = probs.copy()
    delta[rows, y] -= 1.0
    delta /= n
    grads = []
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        a_in = acts[li]
        grads.append((a_in.T @ delta, delta.sum(axis=0)))
        if li == 0:
            break
        delta = delta @ W.T
        if masks[li - 1] is not None:
            delta = delta * masks[li - 1]
        delta = delta * (acts[li] > 0)
    grads.reverse()
    flat = np.concatenate([np.concatenate([gW.reshape(-1), gb]) for gW, gb in grads])
    return loss, flat


# --- Adam ------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, lr: float = 0.001, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, lr, **kw)


def adam_step(state: AdamState, w, grad) -> tuple[AdamState, np.ndarray | FlatWeights]:
    """Bias-corrected Adam update. Returns a new state and new weights."""
    wv, g = as_vector(w), as_vector(grad)
    if wv.shape != g.shape or state.m.shape != wv.shape:
        raise LengthMismatch("weights, gradient and optimizer state must match in length")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_w = wv - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = replace(state, m=m, v=v, t=t)
    if isinstance(w, FlatWeights):
        return new_state, w.with_values(new_w)
    return new_state, new_w


# --- training --------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    mode: str = "offline"
    lr: float = 0.001

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.mode not in ("offline", "local"):
            raise ConfigError(f"unknown train mode {self.mode!r}")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")


OFFLINE_DEFAULTS = TrainConfig(epochs=1000, mode="offline")
LOCAL_DEFAULTS = TrainConfig(epochs=5, mode="local")


def train(w, arch: MlpArchitecture, x, y, cfg: TrainConfig, stream=()) -> FlatWeights:
    """Mini-batch Adam from a fresh optimizer state.

    Shuffling and stochastic layers draw from per-epoch streams of
    ``(cfg.seed, *stream)`` so identical inputs give identical weights.
    """
    cfg.validate()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.shape[0] == 0:
        raise EmptyData("no training data")
    wv = as_vector(w).copy()
    state = AdamState.zeros(wv.size, lr=cfg.lr)
    n = x.shape[0]
    for epoch in range(cfg.epochs):
        order = make_rng(cfg.seed, *stream, "shuffle", epoch).permutation(n)
        rng = make_rng(cfg.seed, *stream, "layers", epoch)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, g = loss_and_grad(wv, arch, x[idx], y[idx], rng)
            state, wv = adam_step(state, wv, g)
    return FlatWeights(wv, arch.layout())


def retrain_local(gm, arch: MlpArchitecture, x, y, cfg: TrainConfig = LOCAL_DEFAULTS,
                  client_id: str = "client", round_index: int = 0) -> LocalUpdate:
    """Train a copy of the broadcast GM on local data; return LM minus GM."""
    cfg.validate()
    if np.asarray(x).shape[0] == 0:
        raise EmptyData(f"client {client_id} has no local data")
    start = as_vector(gm)
    trained = train(start, arch, x, y, cfg, stream=("local", round_index, client_id))
    delta = FlatWeights(trained.values - start, arch.layout())
    return LocalUpdate(client_id, round_index, delta)


def predict_rp(w, arch: MlpArchitecture, x) -> np.ndarray | int:
    """Argmax RP under infer mode; ties resolve to the lowest index."""
    probs = forward(w, arch, x)
    if probs.ndim == 1:
        return int(np.argmax(probs))
    return np.argmax(probs, axis=1)


def localization_error(pred, truth, rp_spacing_m: float = 1.0):
    """Distance in meters between RPs on the 1-D path."""
    err = np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(truth, dtype=np.float64))
    err = err * rp_spacing_m
    return float(err) if err.ndim == 0 else err


def accuracy(w, arch: MlpArchitecture, x, y) -> float:
    return float(np.mean(predict_rp(w, arch, x) == np.asarray(y)))
