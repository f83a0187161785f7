"""Continual FL lifecycle: offline bootstrap, online rounds, scenario scripts
and the sweep/comparison drivers built on top of them."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import dataset as ds
from .aggregation import (DetectionResult, LocalUpdate, MitigationReport, armor_aggregate,
                          bulyan, fedavg_aggregate, krum, multi_krum, projected_delta)
from .attacks import apply_attack
from .config import ExperimentConfig
from .errors import ConfigError, InsufficientHistory, RoundFailure
from .metrics import ErrorStats, error_stats, improvement_ratio, trajectory_norm
from .model_gm import MlpArchitecture, TrainConfig, init_weights, predict_rp, retrain_local, train
from .model_ssm import GmHistory, SsmParams, project_next, train_ssm, update_ssm
from .numeric import FlatWeights

log = logging.getLogger(__name__)


# --- scenario scripts ------------------------------------------------------

@dataclass(frozen=True)
class Phase:
    rounds: int
    attack: bool = False
    att: float | None = None
    clients: tuple[str, ...] | None = None


@dataclass(frozen=True)
class ScenarioScript:
    phases: tuple[Phase, ...]

    def __post_init__(self):
        if not self.phases:
            raise ConfigError("a scenario needs at least one phase")
        for p in self.phases:
            if p.rounds < 1:
                raise ConfigError("every phase needs at least one round")
            if p.att is not None and not 0.0 <= p.att <= 1.0:
                raise ConfigError("phase att must lie in [0, 1]")

    @classmethod
    def parse(cls, text: str) -> "ScenarioScript":
        """``benign:30, attack:30:1.0, benign:10:-:BLU+HTC`` style phase lists.

        Fields are kind, rounds, optional att (``-`` keeps the attack section's
        value) and optional ``+``-joined participating clients.
        """
        phases = []
        for item in [p.strip() for p in text.split(",") if p.strip()]:
            parts = [p.strip() for p in item.split(":")]
            kind = parts[0].lower()
            if kind not in ("benign", "attack") or len(parts) < 2:
                raise ConfigError(f"bad phase {item!r}; use benign:N or attack:N[:ATT[:C1+C2]]")
            try:
                rounds = int(parts[1])
                att = None if len(parts) < 3 or parts[2] in ("", "-") else float(parts[2])
            except ValueError:
                raise ConfigError(f"bad phase {item!r}") from None
            clients = tuple(c for c in parts[3].split("+") if c) if len(parts) > 3 else None
            phases.append(Phase(rounds, kind == "attack", att, clients or None))
        return cls(tuple(phases))

    @property
    def total_rounds(self) -> int:
        return sum(p.rounds for p in self.phases)

    def phase_of(self, round_index: int) -> tuple[int, Phase]:
        r = round_index
        for i, p in enumerate(self.phases):
            if r < p.rounds:
                return i, p
            r -= p.rounds
        raise IndexError(f"round {round_index} is past the end of the script")


# --- data preparation ------------------------------------------------------

@dataclass
class PreparedData:
    arch: MlpArchitecture
    gm_x: np.ndarray
    gm_y: np.ndarray
    ssm_classes: list[tuple[int, np.ndarray, np.ndarray]]
    local: dict[tuple[str, int], tuple[np.ndarray, np.ndarray]]
    heldout: dict[tuple[str, int], tuple[np.ndarray, np.ndarray]]
    devices: list[str]
    rp_spacing_m: float


def load_dataset(cfg: ExperimentConfig) -> ds.FingerprintSet:
    d = cfg.dataset
    fs = ds.generate_synthetic(d.synthetic) if d.is_synthetic else ds.load_csv(d.source)
    if d.building is not None and not d.is_synthetic:
        fs = fs.select(building=d.building)
        if len(fs) == 0:
            raise ConfigError(f"no fingerprints for building {d.building!r}")
    return fs


def build_architecture(cfg: ExperimentConfig, fs: ds.FingerprintSet) -> MlpArchitecture:
    hidden = (256, 128) if cfg.gm.preset == "large" else cfg.gm.hidden
    return MlpArchitecture(fs.ap_count, hidden, fs.rp_count, cfg.gm.dropout, cfg.gm.noise)


def _xy(fs: ds.FingerprintSet) -> tuple[np.ndarray, np.ndarray]:
    return ds.normalize(fs), fs.labels()


def prepare_data(cfg: ExperimentConfig, fs: ds.FingerprintSet | None = None) -> PreparedData:
    fs = load_dataset(cfg) if fs is None else fs
    d = cfg.dataset
    gm_set, ssm_set, _ = ds.split_offline(fs, d.offline_device, d.offline_ci, d.gm_per_rp,
                                          d.ssm_per_rp)
    train_set, held_set = ds.split_holdout(fs, d.holdout_per_rp)
    local, heldout = {}, {}
    for dev in fs.devices:
        for ci in fs.cis:
            local[(dev, ci)] = _xy(train_set.select(device=dev, ci=ci))
            heldout[(dev, ci)] = _xy(held_set.select(device=dev, ci=ci))
    sx, sy = _xy(ssm_set)
    classes = [(rp, sx[sy == rp], sy[sy == rp]) for rp in sorted({int(r) for r in sy})]
    gx, gy = _xy(gm_set)
    return PreparedData(build_architecture(cfg, fs), gx, gy, classes, local, heldout,
                        fs.devices, fs.rp_spacing_m)


# --- offline phase ---------------------------------------------------------

def _train_cfg(cfg: ExperimentConfig, mode: str) -> TrainConfig:
    epochs = cfg.gm.offline_epochs if mode == "offline" else cfg.gm.local_epochs
    return TrainConfig(epochs, cfg.gm.batch_size, cfg.seed, mode, cfg.gm.lr)


_OFFLINE_CACHE: dict[tuple, tuple] = {}


def _offline_key(cfg: ExperimentConfig) -> tuple:
    return (repr(cfg.dataset), repr(cfg.gm), repr(cfg.ssm), cfg.seed)


def offline_phase(cfg: ExperimentConfig, data: PreparedData | None = None,
                  use_cache: bool = True) -> tuple[FlatWeights, SsmParams, GmHistory]:
    """Train the GM, retrain it class by class while snapshotting, fit the SSM.

    The freshly trained GM is snapshot 0, so R retraining classes give R + 1
    snapshots. Results are cached per (dataset, gm, ssm, seed) within a process.
    """
    key = _offline_key(cfg)
    if use_cache and key in _OFFLINE_CACHE:
        gm, ssm, hist = _OFFLINE_CACHE[key]
        return gm, ssm, hist.copy()
    data = prepare_data(cfg) if data is None else data
    if not data.ssm_classes:
        raise InsufficientHistory("no SSM retraining classes in the offline data")
    arch = data.arch
    gm = train(init_weights(arch, cfg.seed), arch, data.gm_x, data.gm_y,
               _train_cfg(cfg, "offline"), stream=("offline",))
    history = GmHistory([gm], window=None)
    retrain = _train_cfg(cfg, "local")
    for rp, x, y in data.ssm_classes:
        gm = train(gm, arch, x, y, retrain, stream=("offline-class", rp))
        history.append(gm)
    ssm = train_ssm(history, cfg.ssm)
    history.window = cfg.ssm.window
    while len(history) > cfg.ssm.window:
        history._snaps.pop(0)
    if use_cache:
        _OFFLINE_CACHE[key] = (gm, ssm, history.copy())
    return gm, ssm, history


# --- online phase ----------------------------------------------------------

@dataclass
class OnlineState:
    gm: FlatWeights
    ssm: SsmParams | None
    history: GmHistory
    round: int = 0


@dataclass
class RoundLog:
    round: int
    ci: int
    aggregator: str
    frobenius_change: float
    clients: list[str]
    detections: list[DetectionResult] = field(default_factory=list)
    mitigations: list[MitigationReport] = field(default_factory=list)
    device_errors: dict[str, float] = field(default_factory=dict)
    attacked: bool = False


def ci_for_round(cfg: ExperimentConfig, round_index: int) -> int:
    seq = cfg.scenario.ci_sequence
    return seq[min(round_index // cfg.scenario.rounds_per_ci, len(seq) - 1)]


def evaluate(gm, data: PreparedData, ci: int, devices: Sequence[str]) -> dict[str, float]:
    out = {}
    for dev in devices:
        x, y = data.heldout.get((dev, ci), (None, None))
        if x is None or len(y) == 0:
            continue
        pred = predict_rp(gm, data.arch, x)
        out[dev] = float(np.mean(np.abs(pred - y))) * data.rp_spacing_m
    return out


def _aggregate(cfg: ExperimentConfig, state: OnlineState, updates: list[LocalUpdate]):
    kind = cfg.aggregator.kind
    gm = state.gm
    if kind == "armor":
        p_next = project_next(state.ssm, state.history, cfg.ssm)
        p_hat = projected_delta(p_next, gm)
        return armor_aggregate(gm, updates, p_hat, cfg.aggregator.mitigation,
                               cfg.aggregator.granularity)
    if kind == "fedavg":
        return fedavg_aggregate(gm, updates), [], []
    f = cfg.aggregator.f
    if kind == "krum":
        step = krum(updates, f).delta.values
    elif kind == "multi_krum":
        m = cfg.aggregator.m if cfg.aggregator.m is not None else max(len(updates) - f - 2, 1)
        step = multi_krum(updates, f, m)
    else:
        step = bulyan(updates, f)
    return gm.with_values(gm.values + step), [], []


def online_round(state: OnlineState, cfg: ExperimentConfig, data: PreparedData,
                 phase: Phase = Phase(1), base_model=None,
                 executor: ThreadPoolExecutor | None = None) -> tuple[OnlineState, RoundLog]:
    r = state.round
    ci = ci_for_round(cfg, r)
    clients = list(phase.clients or cfg.scenario.clients)
    local_cfg = _train_cfg(cfg, "local")

    def client_update(client):
        x, y = data.local[(client, ci)]
        return retrain_local(state.gm, data.arch, x, y, local_cfg, client, r)

    missing = [c for c in clients if (c, ci) not in data.local]
    if missing:
        raise ConfigError(f"no local data for client(s) {missing} at CI {ci}")
    if executor is not None and len(clients) > 1:
        updates = list(executor.map(client_update, clients))
    else:
        updates = [client_update(c) for c in clients]

    adversary = cfg.scenario.adversary
    attacked = phase.attack and adversary in clients and cfg.attack.kind != "none"
    if attacked:
        acfg = cfg.attack if phase.att is None else replace(cfg.attack, att=phase.att)
        i = clients.index(adversary)
        updates[i] = apply_attack(updates[i], acfg, gm_current=state.gm,
                                  gm_history=state.history.snapshots, base_model=base_model)

    new_gm, detections, reports = _aggregate(cfg, state, updates)
    if cfg.aggregator.kind == "armor":
        ssm, history = update_ssm(state.ssm, state.history, new_gm, cfg.ssm, round_index=r)
    else:
        ssm, history = state.ssm, state.history.copy()
        history.append(new_gm)
    devices = list(cfg.scenario.eval_devices or data.devices)
    entry = RoundLog(r, ci, cfg.aggregator.kind, trajectory_norm(state.gm, new_gm), clients,
                     detections, reports, evaluate(new_gm, data, ci, devices), attacked)
    return OnlineState(new_gm, ssm, history, r + 1), entry


def check_clients(cfg: ExperimentConfig, script: ScenarioScript, data: PreparedData) -> None:
    names = set(cfg.scenario.clients)
    for p in script.phases:
        names.update(p.clients or ())
    names.update(cfg.scenario.eval_devices or ())
    unknown = sorted(names - set(data.devices))
    if unknown:
        raise ConfigError(f"unknown device(s) {', '.join(unknown)}; dataset has "
                          f"{', '.join(data.devices)}")
    cis = {ci for (_, ci) in data.local}
    missing = sorted(set(cfg.scenario.ci_sequence) - cis)
    if missing:
        raise ConfigError(f"CI(s) {missing} are not in the dataset")


def run_scenario(cfg: ExperimentConfig, script: ScenarioScript | None = None,
                 data: PreparedData | None = None,
                 on_round: Callable[[RoundLog], None] | None = None,
                 return_state: bool = False):
    """Offline bootstrap, then every phase of ``script`` over one shared state.

    Returns the round logs, or ``(logs, final_state)`` with ``return_state``.
    """
    cfg.validate()
    script = ScenarioScript.parse(cfg.scenario.phases) if script is None else script
    data = prepare_data(cfg) if data is None else data
    check_clients(cfg, script, data)
    gm, ssm, history = offline_phase(cfg, data)
    state = OnlineState(gm, ssm, history)
    base = init_weights(data.arch, cfg.attack.base_model_seed).values
    logs = []
    executor = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for r in range(script.total_rounds):
            _, phase = script.phase_of(r)
            try:
                state, entry = online_round(state, cfg, data, phase, base, executor)
            except ConfigError:
                raise
            except Exception as exc:
                raise RoundFailure(r, exc) from exc
            logs.append(entry)
            if on_round is not None:
                on_round(entry)
    finally:
        if executor is not None:
            executor.shutdown()
    return (logs, state) if return_state else logs


# --- summaries and sweeps --------------------------------------------------

def round_errors(logs: Sequence[RoundLog]) -> list[float]:
    return [e for entry in logs for e in entry.device_errors.values()]


def mean_error(logs: Sequence[RoundLog]) -> float:
    errs = round_errors(logs)
    return float(np.mean(errs)) if errs else float("nan")


def device_mean_errors(logs: Sequence[RoundLog]) -> dict[str, float]:
    acc: dict[str, list[float]] = {}
    for entry in logs:
        for dev, e in entry.device_errors.items():
            acc.setdefault(dev, []).append(e)
    return {dev: float(np.mean(v)) for dev, v in acc.items()}


def _with_attack(cfg: ExperimentConfig, kind: str, att: float) -> ExperimentConfig:
    return replace(cfg, attack=replace(cfg.attack, kind=kind, att=att))


def _script_with_att(script: ScenarioScript, att: float) -> ScenarioScript:
    return ScenarioScript(tuple(replace(p, att=att) if p.attack else p for p in script.phases))


def run_att_sweep(cfg: ExperimentConfig, att_values: Sequence[float],
                  kinds: Sequence[str] = ("random", "gaussian", "history", "mpaf")) -> list[dict]:
    """Mean error per (attack kind, ATT) plus one ``none`` baseline row."""
    for a in att_values:
        if not 0.0 <= a <= 1.0:
            raise ConfigError(f"att value {a} outside [0, 1]")
    script = ScenarioScript.parse(cfg.scenario.phases)
    data = prepare_data(cfg)
    rows = [{"kind": "none", "att": 0.0,
             "mean_error_m": mean_error(run_scenario(_with_attack(cfg, "none", 0.0), script, data))}]
    for kind in kinds:
        for att in att_values:
            c = _with_attack(cfg, kind, att)
            logs = run_scenario(c, _script_with_att(script, att), data)
            rows.append({"kind": kind, "att": float(att), "mean_error_m": mean_error(logs)})
    return rows


def run_ci_sweep(cfg: ExperimentConfig) -> dict[str, dict[int, float]]:
    """Benign continual updates across ``ci_sequence``; device -> CI -> mean error."""
    n = cfg.scenario.rounds_per_ci * len(cfg.scenario.ci_sequence)
    logs = run_scenario(cfg, ScenarioScript((Phase(n),)))
    table: dict[str, dict[int, list[float]]] = {}
    for entry in logs:
        for dev, e in entry.device_errors.items():
            table.setdefault(dev, {}).setdefault(entry.ci, []).append(e)
    return {dev: {ci: float(np.mean(v)) for ci, v in cis.items()} for dev, cis in table.items()}


def ci_means(table: dict[str, dict[int, float]]) -> dict[int, float]:
    cis = sorted({ci for row in table.values() for ci in row})
    return {ci: float(np.mean([row[ci] for row in table.values() if ci in row])) for ci in cis}


@dataclass
class Comparison:
    stats: dict[str, ErrorStats]
    per_kind: dict[str, dict[str, float]]
    ratios: dict[str, dict[str, float]]


def compare_frameworks(cfg: ExperimentConfig, aggregators: Sequence[str],
                       kinds: Sequence[str] = ("random", "gaussian", "history", "mpaf"),
                       att_values: Sequence[float] = (1.0,), reference: str = "armor") -> Comparison:
    """Common-seed benchmark of aggregators over an attack grid.

    Each framework's samples are per-device mean errors for every (kind, att)
    cell; ErrorStats summarise them and ratios divide each baseline by the
    reference framework. A repeated aggregator is labelled ``name#2``, ``name#3``...
    """
    if len(aggregators) < 2:
        raise ConfigError("compare needs at least two aggregators")
    script = ScenarioScript.parse(cfg.scenario.phases)
    data = prepare_data(cfg)
    samples: dict[str, list[float]] = {}
    per_kind: dict[str, dict[str, float]] = {}
    labels = []
    for agg in aggregators:
        n = sum(1 for a in labels if a.split("#")[0] == agg)
        labels.append(agg if n == 0 else f"{agg}#{n + 1}")
    for label, agg in zip(labels, aggregators):
        c_agg = replace(cfg, aggregator=replace(cfg.aggregator, kind=agg))
        c_agg.validate()
        errs, kind_means = [], {}
        for kind in kinds:
            cell_means = []
            for att in att_values:
                logs = run_scenario(_with_attack(c_agg, kind, att), _script_with_att(script, att),
                                    data)
                dev = device_mean_errors(logs)
                errs.extend(dev.values())
                cell_means.append(mean_error(logs))
            kind_means[kind] = float(np.mean(cell_means))
        samples[label] = errs
        per_kind[label] = kind_means
    stats = {agg: error_stats(v) for agg, v in samples.items()}
    ratios = {}
    if reference in stats:
        for agg, st in stats.items():
            if agg == reference:
                continue
            mean_r, worst_r = improvement_ratio(st, stats[reference])
            ratios[agg] = {"mean_ratio": mean_r, "worst_ratio": worst_r}
    return Comparison(stats, per_kind, ratios)
