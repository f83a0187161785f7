"""Model-poisoning perturbations applied to a client's delta.

Every attack touches only the entries chosen by ``select_attacked_indices``.
Indices come from the prefix of one seeded permutation and the perturbation
for entry ``i`` is drawn for every entry up front, so raising ``att`` only
adds indices and never changes the noise already applied to earlier ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .aggregation import LocalUpdate
from .errors import ConfigError, InsufficientHistory, LengthMismatch
from .numeric import as_vector, make_rng

ATTACK_KINDS = ("none", "random", "gaussian", "history", "mpaf")


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "none"
    att: float = 1.0
    beta: float = 1.0
    gaussian_mu: float = 0.0
    gaussian_sigma: float = 0.5
    uniform_radius: float = 0.5
    history_depth: int = 5
    seed: int = 0
    base_model_seed: int = 7919

    def validate(self) -> None:
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}; valid: {', '.join(ATTACK_KINDS)}")
        if not 0.0 <= self.att <= 1.0:
            raise ConfigError("att must lie in [0, 1]")
        if self.gaussian_sigma < 0:
            raise ConfigError("gaussian_sigma must be >= 0")
        if self.uniform_radius < 0:
            raise ConfigError("uniform_radius must be >= 0")
        if self.history_depth < 2:
            raise ConfigError("history_depth must be >= 2")


def attack_rng(cfg: AttackConfig, round_index: int, client_id) -> np.random.Generator:
    return make_rng(cfg.seed, "attack", round_index, client_id)


def attacked_count(d: int, att: float) -> int:
    # round half up so D=10, att=0.5 gives exactly 5
    return min(d, int(math.floor(att * d + 0.5)))


def select_attacked_indices(d: int, att: float, rng) -> np.ndarray:
    """Uniform subset of size round(att*D), without replacement.

    The rng is always advanced by one full permutation, so later draws from
    the same stream do not depend on ``att``.
    """
    if d < 1:
        raise ValueError("D must be >= 1")
    perm = rng.permutation(d)
    return np.sort(perm[:attacked_count(d, att)])


def _apply(update: LocalUpdate, idx: np.ndarray, perturbation: np.ndarray) -> LocalUpdate:
    out = update.delta.values.copy()
    out[idx] = out[idx] + perturbation[idx]
    return LocalUpdate(update.client_id, update.round, update.delta.with_values(out))


def random_attack(update: LocalUpdate, cfg: AttackConfig, rng) -> LocalUpdate:
    d = len(update.delta)
    idx = select_attacked_indices(d, cfg.att, rng)
    noise = rng.uniform(-cfg.uniform_radius, cfg.uniform_radius, d)
    return _apply(update, idx, noise)


def gaussian_attack(update: LocalUpdate, cfg: AttackConfig, rng) -> LocalUpdate:
    d = len(update.delta)
    idx = select_attacked_indices(d, cfg.att, rng)
    noise = cfg.gaussian_mu + cfg.gaussian_sigma * rng.standard_normal(d)
    return _apply(update, idx, noise)


def history_trend(snapshots, depth: int) -> np.ndarray:
    """Mean of the last ``depth - 1`` consecutive GM steps."""
    if depth < 2:
        raise ConfigError("history depth must be >= 2")
    if len(snapshots) < depth:
        raise InsufficientHistory(f"history attack needs {depth} snapshots, have {len(snapshots)}")
    recent = np.vstack([as_vector(s) for s in list(snapshots)[-depth:]])
    return np.mean(np.diff(recent, axis=0), axis=0)


def history_attack(update: LocalUpdate, gm_history, cfg: AttackConfig, rng) -> LocalUpdate:
    f = history_trend(gm_history, cfg.history_depth)
    if f.size != len(update.delta):
        raise LengthMismatch("history snapshots and update differ in length")
    idx = select_attacked_indices(len(update.delta), cfg.att, rng)
    return _apply(update, idx, cfg.beta * f)


def mpaf_attack(update: LocalUpdate, gm_current, base_model, cfg: AttackConfig, rng) -> LocalUpdate:
    """Pull toward an attacker-chosen base model: direction base - GM."""
    g, b = as_vector(gm_current), as_vector(base_model)
    if g.shape != b.shape or g.size != len(update.delta):
        raise LengthMismatch("base model, GM and update must have equal length")
    idx = select_attacked_indices(len(update.delta), cfg.att, rng)
    return _apply(update, idx, cfg.beta * (b - g))


def apply_attack(update: LocalUpdate, cfg: AttackConfig, *, gm_current=None, gm_history=None,
                 base_model=None) -> LocalUpdate:
    """Dispatch on ``cfg.kind`` with the (seed, round, client) stream."""
    cfg.validate()
    if cfg.kind == "none" or cfg.att == 0.0:
        return update
    rng = attack_rng(cfg, update.round, update.client_id)
    if cfg.kind == "random":
        return random_attack(update, cfg, rng)
    if cfg.kind == "gaussian":
        return gaussian_attack(update, cfg, rng)
    if cfg.kind == "history":
        return history_attack(update, gm_history, cfg, rng)
    return mpaf_attack(update, gm_current, base_model, cfg, rng)
