"""RSS fingerprint data: CSV ingest/export, synthetic generation, splits.

CSV layout (UTF-8, comma separated, ``.`` decimals)::

    building,device,ci,rp,<ap-id-1>,...,<ap-id-K>

Missing AP readings (empty cell) load as -100 dBm, the "not visible" value.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, InsufficientData, ParseError, RangeError, SchemaError
from .numeric import make_rng

RSS_MIN = -100.0
RSS_MAX = 0.0
MISSING_TOKENS = ("", "na", "nan", "none", "null")

# device acronyms of the reference phones; MOTO is the adversarial device, OP3 trains offline
DEVICES = ("BLU", "HTC", "S7", "LG", "MOTO", "OP3")


@dataclass(frozen=True)
class Fingerprint:
    rss: np.ndarray
    rp_label: int
    device_id: str
    ci_index: int
    building_id: str


@dataclass
class FingerprintSet:
    """Column-oriented fingerprint table.

    ``rss`` is (n, n_aps); the other arrays are length n. Iterating yields
    ``Fingerprint`` rows in file order.
    """

    rss: np.ndarray
    rp: np.ndarray
    device: np.ndarray
    ci: np.ndarray
    building: np.ndarray
    ap_ids: list[str]
    rp_count: int
    rp_spacing_m: float = 1.0

    def __post_init__(self):
        self.rss = np.asarray(self.rss, dtype=np.float64).reshape(-1, len(self.ap_ids))
        n = self.rss.shape[0]
        self.rp = np.asarray(self.rp, dtype=np.int64).reshape(n)
        self.ci = np.asarray(self.ci, dtype=np.int64).reshape(n)
        self.device = np.asarray(self.device, dtype=object).reshape(n)
        self.building = np.asarray(self.building, dtype=object).reshape(n)
        if self.rp_spacing_m <= 0:
            raise ConfigError("rp_spacing_m must be positive")
        if n and (self.rp.min() < 0 or self.rp.max() >= self.rp_count):
            raise RangeError(f"rp labels must lie in [0, {self.rp_count})")

    def __len__(self) -> int:
        return self.rss.shape[0]

    def __iter__(self) -> Iterator[Fingerprint]:
        for i in range(len(self)):
            yield Fingerprint(self.rss[i].copy(), int(self.rp[i]), str(self.device[i]),
                              int(self.ci[i]), str(self.building[i]))

    @property
    def ap_count(self) -> int:
        return len(self.ap_ids)

    @property
    def devices(self) -> list[str]:
        return list(dict.fromkeys(str(d) for d in self.device))

    @property
    def cis(self) -> list[int]:
        return sorted({int(c) for c in self.ci})

    def subset(self, mask_or_index) -> "FingerprintSet":
        idx = np.asarray(mask_or_index)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return FingerprintSet(self.rss[idx], self.rp[idx], self.device[idx], self.ci[idx],
                              self.building[idx], list(self.ap_ids), self.rp_count,
                              self.rp_spacing_m)

    def select(self, device: str | None = None, ci: int | None = None,
               building: str | None = None) -> "FingerprintSet":
        mask = np.ones(len(self), dtype=bool)
        if device is not None:
            mask &= self.device == device
        if ci is not None:
            mask &= self.ci == ci
        if building is not None:
            mask &= self.building == building
        return self.subset(mask)

    def features(self) -> np.ndarray:
        return normalize(self)

    def labels(self) -> np.ndarray:
        return self.rp.copy()


def concat(sets: Sequence[FingerprintSet]) -> FingerprintSet:
    first = sets[0]
    return FingerprintSet(
        np.concatenate([s.rss for s in sets]), np.concatenate([s.rp for s in sets]),
        np.concatenate([s.device for s in sets]), np.concatenate([s.ci for s in sets]),
        np.concatenate([s.building for s in sets]), list(first.ap_ids), first.rp_count,
        first.rp_spacing_m)


# --- CSV -------------------------------------------------------------------

@dataclass(frozen=True)
class CsvSchema:
    """Column names for the non-AP fields; every other column is an AP."""

    building: str = "building"
    device: str = "device"
    ci: str = "ci"
    rp: str = "rp"
    ap_columns: tuple[str, ...] | None = None
    rp_spacing_m: float = 1.0
    rp_count: int | None = None

    @property
    def meta_columns(self) -> tuple[str, str, str, str]:
        return (self.building, self.device, self.ci, self.rp)


def _parse_int(text: str, what: str, line: int) -> int:
    try:
        return int(text.strip())
    except ValueError:
        try:
            f = float(text)
        except ValueError:
            raise ParseError(f"bad {what} value {text!r}", line) from None
        if not f.is_integer():
            raise ParseError(f"bad {what} value {text!r}", line) from None
        return int(f)


def load_csv(path, schema: CsvSchema | None = None) -> FingerprintSet:
    schema = schema or CsvSchema()
    with open(path, newline="", encoding="utf-8") as fh:
        return _read_csv(fh, schema)


def loads_csv(text: str, schema: CsvSchema | None = None) -> FingerprintSet:
    return _read_csv(io.StringIO(text), schema or CsvSchema())


def _read_csv(fh, schema: CsvSchema) -> FingerprintSet:
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty file: no header row", 1) from None
    header = [h.strip() for h in header]
    missing = [c for c in schema.meta_columns if c not in header]
    if missing:
        raise SchemaError(f"missing required column(s): {', '.join(missing)}")
    if len(set(header)) != len(header):
        raise SchemaError("duplicate column names in header")
    col = {name: i for i, name in enumerate(header)}
    if schema.ap_columns is not None:
        absent = [c for c in schema.ap_columns if c not in col]
        if absent:
            raise SchemaError(f"missing AP column(s): {', '.join(absent)}")
        ap_ids = list(schema.ap_columns)
    else:
        ap_ids = [h for h in header if h not in schema.meta_columns]
    if not ap_ids:
        raise SchemaError("no AP columns in header")
    ap_idx = [col[a] for a in ap_ids]

    rss_rows, rps, devs, cis, blds = [], [], [], [], []
    for row in reader:
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", line)
        values = np.empty(len(ap_idx))
        for k, j in enumerate(ap_idx):
            cell = row[j].strip()
            if cell.lower() in MISSING_TOKENS:
                values[k] = RSS_MIN
                continue
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(f"bad RSS value {cell!r} in column {header[j]}", line) from None
            if not (RSS_MIN <= v <= RSS_MAX):
                raise RangeError(f"RSS {v} outside [-100, 0] in column {header[j]}", line)
            values[k] = v
        rp = _parse_int(row[col[schema.rp]], "rp", line)
        if rp < 0:
            raise RangeError(f"negative rp label {rp}", line)
        rss_rows.append(values)
        rps.append(rp)
        cis.append(_parse_int(row[col[schema.ci]], "ci", line))
        devs.append(row[col[schema.device]].strip())
        blds.append(row[col[schema.building]].strip())

    if not rss_rows:
        raise ParseError("no data rows", 2)
    rp_count = schema.rp_count if schema.rp_count is not None else max(rps) + 1
    return FingerprintSet(np.vstack(rss_rows), rps, devs, cis, blds, ap_ids, rp_count,
                          schema.rp_spacing_m)


def _fmt(v: float) -> str:
    s = repr(float(v))
    return s[:-2] if s.endswith(".0") else s


def dumps_csv(fs: FingerprintSet) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["building", "device", "ci", "rp", *fs.ap_ids])
    for i in range(len(fs)):
        w.writerow([fs.building[i], fs.device[i], int(fs.ci[i]), int(fs.rp[i]),
                    *(_fmt(v) for v in fs.rss[i])])
    return buf.getvalue()


def save_csv(fs: FingerprintSet, path) -> None:
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(dumps_csv(fs))
    os.replace(tmp, path)


# --- normalization ---------------------------------------------------------

def normalize(fs_or_rss) -> np.ndarray:
    """Map dBm in [-100, 0] linearly onto [0, 1]."""
    rss = fs_or_rss.rss if isinstance(fs_or_rss, FingerprintSet) else np.asarray(
        fs_or_rss, dtype=np.float64)
    if rss.size and (rss.min() < RSS_MIN or rss.max() > RSS_MAX):
        raise RangeError("RSS outside [-100, 0]")
    return (rss + 100.0) / 100.0


# --- splits ----------------------------------------------------------------

def split_offline(fs: FingerprintSet, device: str, ci: int, gm_per_rp: int = 5,
                  ssm_per_rp: int = 1):
    """Per RP, first ``gm_per_rp`` rows of (device, ci) train the GM and the next
    ``ssm_per_rp`` train the SSM. All remaining rows form the test set."""
    need = gm_per_rp + ssm_per_rp
    group = np.flatnonzero((fs.device == device) & (fs.ci == ci))
    gm_idx, ssm_idx = [], []
    for rp in range(fs.rp_count):
        rows = group[fs.rp[group] == rp]
        if rows.size < need:
            raise InsufficientData(
                f"RP {rp} has {rows.size} fingerprints for device {device} CI {ci}; need {need}")
        gm_idx.extend(rows[:gm_per_rp])
        ssm_idx.extend(rows[gm_per_rp:need])
    used = np.zeros(len(fs), dtype=bool)
    gm_idx = np.sort(np.asarray(gm_idx, dtype=np.intp))
    ssm_idx = np.sort(np.asarray(ssm_idx, dtype=np.intp))
    used[gm_idx] = True
    used[ssm_idx] = True
    return fs.subset(gm_idx), fs.subset(ssm_idx), fs.subset(~used)


def split_holdout(fs: FingerprintSet, holdout_per_rp: int):
    """Per (building, device, ci, rp) group, the last ``holdout_per_rp`` rows in file
    order are held out for evaluation; the rest are local training data."""
    if holdout_per_rp < 0:
        raise ConfigError("holdout_per_rp must be >= 0")
    held = np.zeros(len(fs), dtype=bool)
    groups: dict[tuple, list[int]] = {}
    for i in range(len(fs)):
        key = (fs.building[i], fs.device[i], int(fs.ci[i]), int(fs.rp[i]))
        groups.setdefault(key, []).append(i)
    for rows in groups.values():
        if holdout_per_rp:
            held[rows[-holdout_per_rp:]] = True
    return fs.subset(~held), fs.subset(held)


# --- synthetic generation --------------------------------------------------

@dataclass(frozen=True)
class DeviceProfile:
    name: str
    gain_offset: float = 0.0
    noise_sigma: float = 2.0


@dataclass(frozen=True)
class CiDrift:
    drift_offset: float = 0.0
    ap_outage_fraction: float = 0.0


# drift magnitudes for the ten collection instances: three same-day sessions,
# then 24 h, 7 d, 30 d, 2 mo, 3 mo, 4 mo, 8 mo
DEFAULT_CI_DRIFT = (
    CiDrift(0.0, 0.0), CiDrift(1.0, 0.0), CiDrift(1.5, 0.0), CiDrift(2.0, 0.02),
    CiDrift(3.0, 0.03), CiDrift(4.0, 0.05), CiDrift(5.0, 0.05), CiDrift(5.5, 0.08),
    CiDrift(6.0, 0.08), CiDrift(8.0, 0.10),
)

DEFAULT_DEVICES = (
    DeviceProfile("BLU", -6.0, 3.0), DeviceProfile("HTC", 4.0, 2.5),
    DeviceProfile("S7", -2.0, 2.0), DeviceProfile("LG", 3.0, 2.5),
    DeviceProfile("MOTO", -4.0, 2.0), DeviceProfile("OP3", 0.0, 2.0),
)


@dataclass(frozen=True)
class SyntheticConfig:
    ap_count: int = 20
    rp_count: int = 20
    device_profiles: tuple[DeviceProfile, ...] = DEFAULT_DEVICES
    ci_drift: tuple[CiDrift, ...] = DEFAULT_CI_DRIFT
    pathloss_exponent: float = 3.0
    seed: int = 0
    fingerprints_per_rp: int = 8
    p0_dbm: float = -30.0
    rp_spacing_m: float = 1.0
    lateral_range_m: tuple[float, float] = (1.0, 6.0)
    building: str = "B1"

    def validate(self) -> None:
        if self.ap_count < 1:
            raise ConfigError("ap_count must be >= 1")
        if self.rp_count < 2:
            raise ConfigError("rp_count must be >= 2")
        if self.fingerprints_per_rp < 1:
            raise ConfigError("fingerprints_per_rp must be >= 1")
        if not self.device_profiles:
            raise ConfigError("at least one device profile is required")
        if len({d.name for d in self.device_profiles}) != len(self.device_profiles):
            raise ConfigError("device names must be unique")
        if not self.ci_drift:
            raise ConfigError("at least one collection instance is required")
        for d in self.device_profiles:
            if d.noise_sigma < 0:
                raise ConfigError(f"negative noise_sigma for device {d.name}")
        for c in self.ci_drift:
            if not 0.0 <= c.ap_outage_fraction <= 1.0:
                raise ConfigError("ap_outage_fraction must lie in [0, 1]")
        if self.rp_spacing_m <= 0:
            raise ConfigError("rp_spacing_m must be positive")
        lo, hi = self.lateral_range_m
        if lo < 0 or hi < lo:
            raise ConfigError("lateral_range_m must satisfy 0 <= lo <= hi")


def ap_geometry(cfg: SyntheticConfig) -> tuple[np.ndarray, np.ndarray]:
    """AP positions along the path and their lateral offsets, in meters."""
    rng = make_rng(cfg.seed, "geometry")
    path_len = (cfg.rp_count - 1) * cfg.rp_spacing_m
    x = rng.uniform(0.0, path_len, cfg.ap_count)
    y = rng.uniform(*cfg.lateral_range_m, cfg.ap_count)
    return x, y


def mean_rss(cfg: SyntheticConfig) -> np.ndarray:
    """Noise-free, unclamped log-distance RSS at every RP, shape (rp_count, ap_count)."""
    ax, ay = ap_geometry(cfg)
    rx = np.arange(cfg.rp_count) * cfg.rp_spacing_m
    d = np.sqrt((rx[:, None] - ax[None, :]) ** 2 + ay[None, :] ** 2)
    return cfg.p0_dbm - 10.0 * cfg.pathloss_exponent * np.log10(np.maximum(d, 1.0))


def generate_synthetic(cfg: SyntheticConfig) -> FingerprintSet:
    """Log-distance path loss fingerprints with device gain, per-CI drift and outages.

    Drift for CI ``c`` at AP ``a`` is ``drift_offset[c] * s[a]`` with a fixed
    per-AP pattern ``s`` in [-1, 1], so environmental change accumulates along
    a consistent direction as CIs advance.
    """
    cfg.validate()
    base = mean_rss(cfg)
    pattern = make_rng(cfg.seed, "drift-pattern").uniform(-1.0, 1.0, cfg.ap_count)
    rows, rps, devs, cis = [], [], [], []
    for ci, drift in enumerate(cfg.ci_drift):
        n_out = int(math.floor(drift.ap_outage_fraction * cfg.ap_count + 0.5))
        outage = make_rng(cfg.seed, "outage", ci).permutation(cfg.ap_count)[:n_out]
        shift = drift.drift_offset * pattern
        for dev in cfg.device_profiles:
            rng = make_rng(cfg.seed, "noise", ci, dev.name)
            for rp in range(cfg.rp_count):
                mu = base[rp] + dev.gain_offset + shift
                for _ in range(cfg.fingerprints_per_rp):
                    noise = rng.normal(0.0, 1.0, cfg.ap_count) * dev.noise_sigma
                    v = np.clip(mu + noise, RSS_MIN, RSS_MAX)
                    v[outage] = RSS_MIN
                    rows.append(v)
                    rps.append(rp)
                    devs.append(dev.name)
                    cis.append(ci)
    ap_ids = [f"AP{i:03d}" for i in range(cfg.ap_count)]
    return FingerprintSet(np.vstack(rows), rps, devs, cis, [cfg.building] * len(rows), ap_ids,
                          cfg.rp_count, cfg.rp_spacing_m)
