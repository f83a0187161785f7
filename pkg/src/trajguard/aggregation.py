"""Server-side aggregation rules.

All updates are deltas (local model minus the broadcast GM). The SSM's
absolute projection is moved into delta space with ``projected_delta``
before detection and mitigation compare against it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import BadM, LengthMismatch, NoUpdates, TooFewClients, ZeroNormVector
from .numeric import FlatWeights, as_vector, cosine_similarity, mean_abs, mean_of

MITIGATION_MODES = ("literal", "sign_aware")
GRANULARITIES = ("scalar", "layer")


@dataclass(frozen=True)
class LocalUpdate:
    client_id: str
    round: int
    delta: FlatWeights

    def __post_init__(self):
        if not isinstance(self.delta, FlatWeights):
            object.__setattr__(self, "delta", FlatWeights(self.delta))


@dataclass(frozen=True)
class DetectionResult:
    client_id: str
    score: float
    flagged: bool


@dataclass(frozen=True)
class MitigationReport:
    client_id: str
    phi: float
    deviations: FlatWeights | None
    applied: bool


def _check_lengths(updates: Sequence[LocalUpdate], n: int) -> None:
    for u in updates:
        if len(u.delta) != n:
            raise LengthMismatch(f"update from {u.client_id} has length {len(u.delta)}, expected {n}")


def projected_delta(p_next, w_current) -> np.ndarray:
    p, w = as_vector(p_next), as_vector(w_current)
    if p.shape != w.shape:
        raise LengthMismatch(f"projection length {p.size} != GM length {w.size}")
    return p - w


def detect_corruption(update: LocalUpdate, p_hat) -> DetectionResult:
    """Cosine score against the projected delta; negative scores are flagged.

    A zero-norm update or projection scores 0 and counts as legitimate.
    """
    try:
        score = cosine_similarity(update.delta, p_hat)
    except ZeroNormVector:
        score = 0.0
    return DetectionResult(update.client_id, score, score < 0.0)


def mitigate(update: LocalUpdate, p_hat, mode: str = "literal",
             granularity: str = "scalar") -> tuple[LocalUpdate, MitigationReport]:
    """Shift a flagged update by its mean absolute deviation from the projection.

    ``literal`` subtracts phi from every entry; ``sign_aware`` subtracts
    ``phi * sign(D_i)`` so every entry moves toward the projection. With
    ``granularity="layer"`` phi is computed and applied per layer.
    """
    if mode not in MITIGATION_MODES:
        raise ValueError(f"unknown mitigation mode {mode!r}")
    if granularity not in GRANULARITIES:
        raise ValueError(f"unknown granularity {granularity!r}")
    delta = update.delta.values
    p = as_vector(p_hat)
    if p.shape != delta.shape:
        raise LengthMismatch(f"projection length {p.size} != update length {delta.size}")
    dev = delta - p
    phi = mean_abs(dev)
    if granularity == "scalar":
        shift = np.full_like(dev, phi)
    else:
        shift = np.empty_like(dev)
        off = 0
        for _, shape in update.delta.layout:
            n = int(np.prod(shape))
            shift[off:off + n] = np.mean(np.abs(dev[off:off + n]))
            off += n
    if mode == "sign_aware":
        shift = shift * np.sign(dev)
    new = LocalUpdate(update.client_id, update.round, update.delta.with_values(delta - shift))
    report = MitigationReport(update.client_id, phi, update.delta.with_values(dev), True)
    return new, report


def fedavg_aggregate(gm, updates: Sequence[LocalUpdate]) -> np.ndarray | FlatWeights:
    """W + mean of the client deltas."""
    if not updates:
        raise NoUpdates("no updates to aggregate")
    w = as_vector(gm)
    _check_lengths(updates, w.size)
    out = w + mean_of(u.delta for u in updates)
    return gm.with_values(out) if isinstance(gm, FlatWeights) else out


def armor_aggregate(gm, updates: Sequence[LocalUpdate], p_hat, mode: str = "literal",
                    granularity: str = "scalar"):
    """Detect, mitigate flagged updates, then federated-average all of them.

    Returns (new GM, detections, mitigation reports); unflagged updates get a
    report with ``applied=False``.
    """
    if not updates:
        raise NoUpdates("no updates to aggregate")
    w = as_vector(gm)
    _check_lengths(updates, w.size)
    p = as_vector(p_hat)
    if p.shape != w.shape:
        raise LengthMismatch("projection length differs from GM length")
    detections, reports, cleaned = [], [], []
    for u in updates:
        det = detect_corruption(u, p)
        detections.append(det)
        if det.flagged:
            u, rep = mitigate(u, p, mode, granularity)
        else:
            rep = MitigationReport(u.client_id, 0.0, None, False)
        reports.append(rep)
        cleaned.append(u)
    return fedavg_aggregate(gm, cleaned), detections, reports


# --- distance-based baselines ----------------------------------------------

def _sq_dists(vs: np.ndarray) -> np.ndarray:
    k = vs.shape[0]
    d = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            diff = vs[i] - vs[j]
            d[i, j] = d[j, i] = float(np.dot(diff, diff))
    return d


def _neighbour_count(k: int, f: int) -> int:
    # K-f-2 in the regular regime; clamped so shrinking candidate pools during
    # iterative selection still compare against at least one neighbour
    return min(max(k - f - 2, 1), k - 1)


def krum_scores(updates: Sequence[LocalUpdate], f: int) -> np.ndarray:
    """Sum of squared distances from each update to its nearest neighbours."""
    vs = np.vstack([u.delta.values for u in updates])
    d = _sq_dists(vs)
    nb = _neighbour_count(len(updates), f)
    scores = np.empty(len(updates))
    for i in range(len(updates)):
        others = np.sort(np.delete(d[i], i))
        scores[i] = float(np.sum(others[:nb]))
    return scores


def _argmin_score(updates: Sequence[LocalUpdate], scores: np.ndarray) -> int:
    return min(range(len(updates)), key=lambda i: (scores[i], updates[i].client_id))


def krum(updates: Sequence[LocalUpdate], f: int) -> LocalUpdate:
    """Update with the lowest Krum score; ties go to the lowest client_id."""
    k = len(updates)
    if k < f + 3:
        raise TooFewClients(f"krum needs K >= f + 3 (K={k}, f={f})")
    _check_lengths(updates, len(updates[0].delta))
    return updates[_argmin_score(updates, krum_scores(updates, f))]


def _multi_krum_select(updates: Sequence[LocalUpdate], f: int, m: int) -> list[LocalUpdate]:
    pool = list(updates)
    chosen = []
    while len(chosen) < m:
        i = _argmin_score(pool, krum_scores(pool, f)) if len(pool) > 1 else 0
        chosen.append(pool.pop(i))
    return sorted(chosen, key=lambda u: u.client_id)


def _sorted_ids_ok(updates: Sequence[LocalUpdate]) -> None:
    ids = [u.client_id for u in updates]
    if len(set(ids)) != len(ids):
        raise ValueError("client ids must be unique")


def multi_krum(updates: Sequence[LocalUpdate], f: int, m: int) -> np.ndarray:
    """Mean delta of ``m`` updates picked one at a time by Krum, rescoring the rest."""
    k = len(updates)
    if k < f + 3:
        raise TooFewClients(f"multi-krum needs K >= f + 3 (K={k}, f={f})")
    if not 1 <= m <= k:
        raise BadM(f"m must lie in [1, {k}], got {m}")
    _sorted_ids_ok(updates)
    _check_lengths(updates, len(updates[0].delta))
    return mean_of(u.delta for u in _multi_krum_select(updates, f, m))


def bulyan(updates: Sequence[LocalUpdate], f: int) -> np.ndarray:
    """Multi-Krum selects K - 2f updates; each coordinate then averages the
    K - 4f selected values closest to the coordinate-wise median."""
    k = len(updates)
    if k < 4 * f + 3:
        raise TooFewClients(f"bulyan needs K >= 4f + 3 (K={k}, f={f})")
    _sorted_ids_ok(updates)
    _check_lengths(updates, len(updates[0].delta))
    theta = k - 2 * f
    beta = theta - 2 * f
    selected = _multi_krum_select(updates, f, theta)
    s = np.vstack([u.delta.values for u in selected])
    if beta == theta:
        return mean_of(s)
    med = np.median(s, axis=0)
    order = np.argsort(np.abs(s - med), axis=0, kind="stable")[:beta]
    closest = np.take_along_axis(s, order, axis=0)
    return np.mean(closest, axis=0)
