"""Run outputs: atomic file writes, CSV logs, checkpoints and the run manifest."""

from __future__ import annotations

import csv
import io
import json
import os
import platform
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .errors import ConfigError
from .numeric import FlatWeights

ROUNDS_HEADER = ("round", "ci", "aggregator", "frobenius_change", "client_id", "score",
                 "flagged", "phi", "device", "mean_error_m")
TRAJECTORY_HEADER = ("round", "frobenius_change")
SWEEP_HEADER = ("kind", "att", "mean_error_m")
CI_HEADER = ("device", "ci", "mean_error_m")
COMPARE_HEADER = ("aggregator", "mean_m", "worst_m", "best_m", "n")


def fmt(v) -> str:
    """Locale-free, round-trippable number text."""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return "" if v is None else str(v)


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def json_text(obj) -> str:
    def default(o):
        if isinstance(o, np.generic):
            return o.item()
        if isinstance(o, np.ndarray):
            return o.tolist()
        raise TypeError(f"not JSON serialisable: {type(o).__name__}")
    # inf ratios are written as the string "inf" to keep the file strict JSON
    return json.dumps(_finite(obj), indent=2, sort_keys=True, default=default) + "\n"


def _finite(obj):
    if isinstance(obj, float) and not np.isfinite(obj):
        return "inf" if obj > 0 else ("-inf" if obj < 0 else "nan")
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


# --- round logs ------------------------------------------------------------

def round_rows(logs) -> list[tuple]:
    """One row per client (detection fields) and one per evaluated device.

    Client rows leave ``device``/``mean_error_m`` empty; device rows leave the
    client fields empty. Non-ARMOR aggregators have empty score/flagged/phi.
    """
    rows = []
    for lg in logs:
        base = (lg.round, lg.ci, lg.aggregator, lg.frobenius_change)
        dets = {d.client_id: d for d in lg.detections}
        reps = {m.client_id: m for m in lg.mitigations}
        for cid in lg.clients:
            d, m = dets.get(cid), reps.get(cid)
            rows.append(base + (cid, None if d is None else d.score,
                                None if d is None else d.flagged,
                                None if m is None else m.phi, None, None))
        for dev in sorted(lg.device_errors):
            rows.append(base + (None, None, None, None, dev, lg.device_errors[dev]))
    return rows


def rounds_csv(logs) -> str:
    return csv_text(ROUNDS_HEADER, round_rows(logs))


def trajectory_csv(logs) -> str:
    return csv_text(TRAJECTORY_HEADER, ((lg.round, lg.frobenius_change) for lg in logs))


# --- checkpoints -----------------------------------------------------------

def save_weights(path, w: FlatWeights, meta: dict | None = None) -> None:
    """``path`` gets little-endian float64 values, ``path.json`` the layout."""
    path = Path(path)
    atomic_write_bytes(path, np.asarray(w.values, dtype="<f8").tobytes())
    side = {"layout": [[name, list(shape)] for name, shape in w.layout], "dtype": "<f8",
            "length": len(w), **(meta or {})}
    atomic_write_text(path.with_name(path.name + ".json"), json_text(side))


def load_weights(path) -> tuple[FlatWeights, dict]:
    path = Path(path)
    side_path = path.with_name(path.name + ".json")
    if not path.is_file() or not side_path.is_file():
        raise ConfigError(f"checkpoint {path} or its layout sidecar is missing")
    side = json.loads(side_path.read_text(encoding="utf-8"))
    values = np.frombuffer(path.read_bytes(), dtype="<f8").astype(np.float64)
    if values.size != side["length"]:
        raise ConfigError(f"checkpoint {path} has {values.size} values, sidecar says {side['length']}")
    layout = tuple((name, tuple(shape)) for name, shape in side["layout"])
    return FlatWeights(values, layout), side


# --- manifest --------------------------------------------------------------

@dataclass
class RunManifest:
    config_hash: str
    seeds: dict
    version: str = __version__
    started_utc: str = ""
    finished_utc: str = ""
    outputs: dict = field(default_factory=dict)
    command: str = ""
    python: str = field(default_factory=platform.python_version)
    numpy: str = np.__version__

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def utc_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
