"""Experiment configuration: dataclasses plus an INI reader/writer.

One file per run, sections ``dataset``, ``gm``, ``ssm``, ``attack``,
``aggregator``, ``scenario`` and ``seeds``. Every key is optional; missing
keys take the defaults below. See ``configs/`` for annotated examples.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .attacks import ATTACK_KINDS, AttackConfig
from .dataset import CiDrift, DeviceProfile, SyntheticConfig
from .errors import ConfigError
from .model_ssm import SsmConfig

AGGREGATORS = ("armor", "fedavg", "krum", "multi_krum", "bulyan")


@dataclass(frozen=True)
class DatasetConfig:
    source: str = "synthetic"
    building: str | None = None
    offline_device: str = "OP3"
    offline_ci: int = 0
    gm_per_rp: int = 5
    ssm_per_rp: int = 1
    holdout_per_rp: int = 2
    synthetic: SyntheticConfig = SyntheticConfig()

    @property
    def is_synthetic(self) -> bool:
        return self.source == "synthetic"


@dataclass(frozen=True)
class GmConfig:
    preset: str = "desk"
    hidden: tuple[int, ...] = (16, 8)
    dropout: float = 0.15
    noise: float = 0.15
    lr: float = 0.001
    batch_size: int = 32
    offline_epochs: int = 200
    local_epochs: int = 5


@dataclass(frozen=True)
class AggregatorConfig:
    kind: str = "armor"
    mitigation: str = "literal"
    granularity: str = "scalar"
    f: int = 1
    m: int | None = None


@dataclass(frozen=True)
class ScenarioConfig:
    clients: tuple[str, ...] = ("BLU", "HTC", "LG", "MOTO")
    adversary: str | None = "MOTO"
    eval_devices: tuple[str, ...] | None = None
    phases: str = "benign:30, attack:30, benign:30"
    rounds_per_ci: int = 5
    ci_sequence: tuple[int, ...] = (0,)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = DatasetConfig()
    gm: GmConfig = GmConfig()
    ssm: SsmConfig = SsmConfig()
    attack: AttackConfig = AttackConfig(kind="gaussian")
    aggregator: AggregatorConfig = AggregatorConfig()
    scenario: ScenarioConfig = ScenarioConfig()
    seed: int = 0
    workers: int = 1

    def validate(self) -> None:
        if self.aggregator.kind not in AGGREGATORS:
            raise ConfigError(
                f"unknown aggregator {self.aggregator.kind!r}; valid: {', '.join(AGGREGATORS)}")
        if self.aggregator.mitigation not in ("literal", "sign_aware"):
            raise ConfigError(f"unknown mitigation mode {self.aggregator.mitigation!r}")
        if self.aggregator.granularity not in ("scalar", "layer"):
            raise ConfigError(f"unknown granularity {self.aggregator.granularity!r}")
        if self.aggregator.f < 0:
            raise ConfigError("aggregator f must be >= 0")
        sc = self.scenario
        k, f = len(sc.clients), self.aggregator.f
        need = {"krum": f + 3, "multi_krum": f + 3, "bulyan": 4 * f + 3}.get(self.aggregator.kind)
        if need is not None and k < need:
            raise ConfigError(f"{self.aggregator.kind} with f={f} needs at least {need} clients, "
                              f"have {k}")
        m = self.aggregator.m
        if self.aggregator.kind == "multi_krum" and m is not None and not 1 <= m <= k:
            raise ConfigError(f"multi_krum m must lie in [1, {k}], got {m}")
        if not sc.clients:
            raise ConfigError("at least one client is required")
        if len(set(sc.clients)) != len(sc.clients):
            raise ConfigError("client names must be unique")
        if sc.adversary is not None and sc.adversary not in sc.clients:
            raise ConfigError(f"adversary {sc.adversary!r} is not among the clients")
        if sc.rounds_per_ci < 1:
            raise ConfigError("rounds_per_ci must be >= 1")
        if not sc.ci_sequence:
            raise ConfigError("ci_sequence must not be empty")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.gm.offline_epochs < 1 or self.gm.local_epochs < 1:
            raise ConfigError("gm epochs must be >= 1")
        if self.gm.preset not in ("desk", "large"):
            raise ConfigError(f"unknown gm preset {self.gm.preset!r}")
        self.attack.validate()
        self.ssm.validate()
        if self.dataset.is_synthetic:
            self.dataset.synthetic.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON form; independent of file key order."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# --- INI parsing -----------------------------------------------------------

def _split(text: str) -> list[str]:
    return [p.strip() for p in text.replace(";", ",").split(",") if p.strip()]


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in _split(text))
    except ValueError:
        raise ConfigError(f"expected a comma-separated integer list, got {text!r}") from None


def _opt(text: str) -> str | None:
    t = text.strip()
    return None if t.lower() in ("", "none", "null") else t


def _devices(text: str) -> tuple[DeviceProfile, ...]:
    out = []
    for item in _split(text):
        parts = item.split(":")
        try:
            name = parts[0].strip()
            gain = float(parts[1]) if len(parts) > 1 else 0.0
            sigma = float(parts[2]) if len(parts) > 2 else 2.0
        except ValueError:
            raise ConfigError(f"bad device profile {item!r}; use NAME:GAIN:SIGMA") from None
        out.append(DeviceProfile(name, gain, sigma))
    return tuple(out)


def _drift(text: str) -> tuple[CiDrift, ...]:
    out = []
    for item in _split(text):
        parts = item.split(":")
        try:
            out.append(CiDrift(float(parts[0]), float(parts[1]) if len(parts) > 1 else 0.0))
        except ValueError:
            raise ConfigError(f"bad ci_drift entry {item!r}; use OFFSET:OUTAGE") from None
    return tuple(out)


def _coerce(cls, section: configparser.SectionProxy, converters: dict | None = None,
            renames: dict | None = None, extra_keys=(), skip=(), base=None):
    """Build dataclass ``cls`` from a section, starting from ``base`` if given.

    Scalar fields convert by the type of their default; anything else needs an
    entry in ``converters``.
    """
    converters = converters or {}
    renames = renames or {}
    known = {renames.get(f.name, f.name) for f in fields(cls) if f.name not in skip}
    for key in section:
        if key not in known and key not in extra_keys:
            raise ConfigError(f"unknown key {key!r} in section [{section.name}]")
    kwargs = {}
    for f in fields(cls):
        key = renames.get(f.name, f.name)
        if f.name in skip or key not in section:
            continue
        raw = section[key]
        if f.name in converters:
            conv = converters[f.name]
        elif isinstance(f.default, bool):
            conv = _bool
        elif isinstance(f.default, (int, float, str)):
            conv = lambda t, typ=type(f.default): typ(t.strip())
        else:
            raise TypeError(f"no converter for {cls.__name__}.{f.name}")
        try:
            kwargs[f.name] = conv(raw)
        except ConfigError:
            raise
        except ValueError:
            raise ConfigError(f"bad value for [{section.name}] {key}: {raw!r}") from None
    return cls(**kwargs) if base is None else replace(base, **kwargs)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(text)


def _opt_int(text: str) -> int | None:
    return None if _opt(text) is None else int(text)


_SYNTH_FIELDS = {"synthetic_seed": "seed", "devices": "device_profiles"}

SECTIONS = ("dataset", "gm", "ssm", "attack", "aggregator", "scenario", "seeds")

_SYNTH_KEYS = {
    "ap_count": int, "rp_count": int, "fingerprints_per_rp": int,
    "pathloss_exponent": float, "p0_dbm": float, "rp_spacing_m": float,
    "synthetic_seed": int, "devices": _devices, "ci_drift": _drift,
}


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}") from None
    for name in cp.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]; valid: {', '.join(SECTIONS)}")
    sec = lambda name: cp[name] if cp.has_section(name) else cp[configparser.DEFAULTSECT]

    ds = sec("dataset")
    synth_kwargs = {}
    for key, conv in _SYNTH_KEYS.items():
        if key in ds:
            try:
                synth_kwargs[_SYNTH_FIELDS.get(key, key)] = conv(ds[key])
            except ValueError:
                raise ConfigError(f"bad value for [dataset] {key}: {ds[key]!r}") from None
    synth = SyntheticConfig(**synth_kwargs)
    dataset = _coerce(DatasetConfig, ds, {"building": _opt}, skip=("synthetic",),
                      extra_keys=tuple(_SYNTH_KEYS))
    dataset = replace(dataset, synthetic=replace(synth, building=dataset.building or synth.building))

    gm = _coerce(GmConfig, sec("gm"), {"hidden": _ints})
    ssm = _coerce(SsmConfig, sec("ssm"))
    attack = _coerce(AttackConfig, sec("attack"), base=ExperimentConfig.attack)
    if attack.kind not in ATTACK_KINDS:
        raise ConfigError(f"unknown attack kind {attack.kind!r}; valid: {', '.join(ATTACK_KINDS)}")
    agg = _coerce(AggregatorConfig, sec("aggregator"), {"m": _opt_int})
    scenario = _coerce(ScenarioConfig, sec("scenario"), {
        "clients": lambda t: tuple(_split(t)),
        "eval_devices": lambda t: None if _opt(t) is None else tuple(_split(t)),
        "adversary": _opt,
        "ci_sequence": _ints,
    })
    seeds = sec("seeds")
    for key in seeds:
        if key not in ("seed", "workers") and cp.has_section("seeds"):
            raise ConfigError(f"unknown key {key!r} in section [seeds]")
    try:
        seed = int(seeds.get("seed", "0"))
        workers = int(seeds.get("workers", "1"))
    except ValueError:
        raise ConfigError("seeds.seed and seeds.workers must be integers") from None
    cfg = ExperimentConfig(dataset, gm, ssm, attack, agg, scenario, seed, workers)
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    cfg = parse_config(p.read_text(encoding="utf-8"))
    src = cfg.dataset.source
    if not cfg.dataset.is_synthetic and not Path(src).is_absolute():
        cfg = replace(cfg, dataset=replace(cfg.dataset, source=str((p.parent / src).resolve())))
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    """Render ``cfg`` back to INI text that ``parse_config`` reads losslessly."""
    j = lambda xs: ", ".join(str(x) for x in xs)
    s = cfg.dataset.synthetic
    lines = ["[dataset]", f"source = {cfg.dataset.source}",
             f"building = {cfg.dataset.building or ''}",
             f"offline_device = {cfg.dataset.offline_device}",
             f"offline_ci = {cfg.dataset.offline_ci}",
             f"gm_per_rp = {cfg.dataset.gm_per_rp}",
             f"ssm_per_rp = {cfg.dataset.ssm_per_rp}",
             f"holdout_per_rp = {cfg.dataset.holdout_per_rp}",
             f"ap_count = {s.ap_count}", f"rp_count = {s.rp_count}",
             f"fingerprints_per_rp = {s.fingerprints_per_rp}",
             f"pathloss_exponent = {s.pathloss_exponent!r}", f"p0_dbm = {s.p0_dbm!r}",
             f"rp_spacing_m = {s.rp_spacing_m!r}", f"synthetic_seed = {s.seed}",
             "devices = " + j(f"{d.name}:{d.gain_offset!r}:{d.noise_sigma!r}"
                              for d in s.device_profiles),
             "ci_drift = " + j(f"{c.drift_offset!r}:{c.ap_outage_fraction!r}" for c in s.ci_drift),
             "", "[gm]"]
    g = cfg.gm
    lines += [f"preset = {g.preset}", f"hidden = {j(g.hidden)}", f"dropout = {g.dropout!r}",
              f"noise = {g.noise!r}", f"lr = {g.lr!r}", f"batch_size = {g.batch_size}",
              f"offline_epochs = {g.offline_epochs}", f"local_epochs = {g.local_epochs}", "",
              "[ssm]"]
    m = cfg.ssm
    lines += [f"hidden = {m.hidden}", f"epochs = {m.epochs}", f"lr = {m.lr!r}",
              f"batch_size = {m.batch_size}", f"update_epochs = {m.update_epochs}",
              f"update_lr = {m.update_lr!r}", f"window = {m.window}",
              f"candidate = {m.candidate}", f"ssm_input = {m.ssm_input}",
              f"bias_init = {m.bias_init}", f"seed = {m.seed}", "", "[attack]"]
    a = cfg.attack
    lines += [f"kind = {a.kind}", f"att = {a.att!r}", f"beta = {a.beta!r}",
              f"gaussian_mu = {a.gaussian_mu!r}", f"gaussian_sigma = {a.gaussian_sigma!r}",
              f"uniform_radius = {a.uniform_radius!r}", f"history_depth = {a.history_depth}",
              f"seed = {a.seed}", f"base_model_seed = {a.base_model_seed}", "", "[aggregator]"]
    ag = cfg.aggregator
    lines += [f"kind = {ag.kind}", f"mitigation = {ag.mitigation}",
              f"granularity = {ag.granularity}", f"f = {ag.f}",
              f"m = {'' if ag.m is None else ag.m}", "", "[scenario]"]
    sc = cfg.scenario
    lines += [f"clients = {j(sc.clients)}", f"adversary = {sc.adversary or ''}",
              f"eval_devices = {j(sc.eval_devices) if sc.eval_devices else ''}",
              f"phases = {sc.phases}", f"rounds_per_ci = {sc.rounds_per_ci}",
              f"ci_sequence = {j(sc.ci_sequence)}", "", "[seeds]",
              f"seed = {cfg.seed}", f"workers = {cfg.workers}", ""]
    return "\n".join(lines)
