"""Experiment orchestration: config, cached stage artifacts, seed replicates, reports.

Every stage writes its outputs under the experiment's output directory next
to a manifest holding a key (hash of everything the stage depends on) and the
sha256 of each file.  A later run reuses an artifact only when the key matches
and the files still hash to the recorded digests.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .data import (TEST, TRAIN, VALID, DatasetError, MobilityDataset, PreprocessConfig, RecordFormat,
                   Trajectory, dataset_stats, load_checkins, preprocess, synth_generate)
from .defenses import (ATTACK_ITEMS, TRADEOFF_HEADER, DpConfig, GeoIndConfig, dpsgd_hook, geo_ind_perturb,
                       jft_train, overfit_controls, protected_set, tradeoff_eval)
from .evaluation import (USER_STATS, balanced_indices, compute_aggregate_stats, extraction_asr, mia_eval,
                         training_windows, vulnerability_binning)
from .extraction import LocExtractConfig, TrajExtractConfig, loc_extract, traj_extract
from .membership import (LocTarget, ShadowEnsemble, SpaTemConfig, TrajTarget, lira_scores, loc_targets_from,
                         plan_shadows, spa_tem_scores, synthesize_carrier, train_shadows, traj_confidences,
                         PHIS)
from .model.network import ModelConfig, PoiModel
from .model.training import TrainConfig, TrainResult, evaluate_topk, train

log = logging.getLogger(__name__)

OUTPUT_ENV = "POIAUDIT_OUTPUT_DIR"
ATTACKS = ("locextract", "trajextract", "locmia", "trajmia")
MECHANISMS = ("none", "l2", "early-stop", "dpsgd", "jft", "geoind")


class ConfigError(ValueError):
    pass


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


# -- configuration --------------------------------------------------------


@dataclass(frozen=True)
class LocMiaConfig:
    n_shadow: int = 16
    n_t: int = 10
    n_l: int = 10
    n_targets: int = 100  # per class
    carrier_time: float = 0.5
    phi: str = "logit"

    def __post_init__(self):
        _check_mia(self)
        if min(self.n_t, self.n_l, self.n_targets) < 1 or not 0.0 <= self.carrier_time <= 1.0:
            raise ConfigError("locmia needs n_t, n_l, n_targets >= 1 and carrier_time in [0, 1]")


@dataclass(frozen=True)
class TrajMiaConfig:
    n_shadow: int = 16
    n_targets: int | None = None  # per class; None = every non-member
    phi: str = "logit"
    null_experiment: bool = True

    def __post_init__(self):
        _check_mia(self)
        if self.n_targets is not None and self.n_targets < 1:
            raise ConfigError("trajmia n_targets must be >= 1")


def _check_mia(cfg) -> None:
    # LiRA fits a variance on each side, so it needs two IN and two OUT shadows per target
    if cfg.n_shadow < 2:
        raise ConfigError(f"n_shadow must be >= 2, got {cfg.n_shadow}")
    if cfg.phi not in PHIS:
        raise ConfigError(f"unknown phi {cfg.phi!r}")


@dataclass(frozen=True)
class TrajExtractRun:
    n_targets: int = 50


@dataclass(frozen=True)
class DefenseSpec:
    mechanism: str = "dpsgd"
    eps: float = 5.0
    delta: float = 1e-3
    clip: float = 10.0
    eps_g: float = 0.01
    radius: float = 400.0
    protect: str = "all"  # "all" | "targeted:<fraction>"
    attack: str = "locextract"  # whose sensitive items JFT / Geo-Ind protect
    weight_decay: float = 1e-2
    patience: int = 5
    epochs: int | None = None  # DP training / fine-tuning epochs; None = victim epochs

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise ConfigError(f"unknown defense mechanism {self.mechanism!r}")
        if self.attack not in ATTACKS:
            raise ConfigError(f"unknown attack {self.attack!r}")
        scope_fraction(self.protect)

    @property
    def name(self) -> str:
        if self.mechanism in ("dpsgd", "jft"):
            return f"{self.mechanism}-eps{self.eps:g}"
        if self.mechanism == "geoind":
            return f"geoind-eps{self.eps_g:g}"
        return self.mechanism


def scope_fraction(protect: str) -> tuple[str, float]:
    if protect == "all":
        return "all", 1.0
    if protect.startswith("targeted"):
        _, _, frac = protect.partition(":")
        try:
            f = float(frac) if frac else 0.3
        except ValueError as exc:
            raise ConfigError(f"bad protect value {protect!r}") from exc
        if not 0 < f <= 1:
            raise ConfigError("targeted fraction must lie in (0, 1]")
        return "targeted", f
    raise ConfigError(f"bad protect value {protect!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: dict = field(default_factory=lambda: {"source": "synth", "n_users": 200, "n_locations": 500,
                                                   "n_days": 40, "seed": 7})
    preprocess: PreprocessConfig = PreprocessConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig(snapshot_epochs=(20,))
    shadow_train: TrainConfig = TrainConfig(epochs=50, evaluate=False)
    attacks: tuple[str, ...] = ATTACKS
    locextract: LocExtractConfig = LocExtractConfig()
    trajextract: TrajExtractConfig = TrajExtractConfig()
    trajextract_run: TrajExtractRun = TrajExtractRun()
    locmia: LocMiaConfig = LocMiaConfig()
    trajmia: TrajMiaConfig = TrajMiaConfig()
    defenses: tuple[DefenseSpec, ...] = ()
    n_seeds: int = 5
    seeds: tuple[int, ...] | None = None
    output_dir: str = "poiaudit-out"
    workers: int = 1

    def __post_init__(self):
        for a in self.attacks:
            if a not in ATTACKS:
                raise ConfigError(f"unknown attack {a!r}")
        if self.n_seeds < 1:
            raise ConfigError("n_seeds must be >= 1")
        s = self.seed_list()
        if len(set(s)) != len(s):
            raise ConfigError("seeds must be distinct")
        src = self.dataset.get("source")
        if src not in ("synth", "file", "dataset"):
            raise ConfigError(f"unknown dataset source {src!r}")
        if src in ("file", "dataset") and not Path(self.dataset.get("path", "")).is_file():
            raise ConfigError(f"dataset file {self.dataset.get('path')!r} does not exist")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def seed_list(self) -> list[int]:
        return list(self.seeds) if self.seeds is not None else list(range(self.n_seeds))

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("workers")
        return _hash(d)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        try:
            return _build(cls, d)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(doc)

    def with_overrides(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


_NESTED = {
    "preprocess": PreprocessConfig, "model": ModelConfig, "train": TrainConfig, "shadow_train": TrainConfig,
    "locextract": LocExtractConfig, "trajextract": TrajExtractConfig, "trajextract_run": TrajExtractRun,
    "locmia": LocMiaConfig, "trajmia": TrajMiaConfig,
}


def _build(cls, d: dict):
    if not isinstance(d, dict):
        raise ConfigError(f"expected an object for {cls.__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kw = {}
    for k, v in d.items():
        if cls is ExperimentConfig and k in _NESTED:
            kw[k] = _build(_NESTED[k], v)
        elif cls is ExperimentConfig and k == "defenses":
            kw[k] = tuple(_build(DefenseSpec, x) for x in v)
        elif isinstance(v, list):
            kw[k] = tuple(v)
        else:
            kw[k] = v
    return cls(**kw)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(_plain(obj), sort_keys=True).encode()).hexdigest()


def desk_preset(**changes) -> ExperimentConfig:
    """200 users, 500 POIs, 16+16 shadows trained for 50 epochs, 200-epoch victims."""
    return ExperimentConfig(
        dataset={"source": "synth", "n_users": 200, "n_locations": 500, "n_days": 40, "seed": 7},
        train=TrainConfig(epochs=200, snapshot_epochs=(20,)),
        shadow_train=TrainConfig(epochs=50, evaluate=False),
        locmia=LocMiaConfig(n_shadow=16),
        trajmia=TrajMiaConfig(n_shadow=16),
        defenses=(DefenseSpec("dpsgd", eps=5.0, epochs=10),),
        **changes,
    )


PRESETS: dict[str, Callable[..., ExperimentConfig]] = {"desk": desk_preset}


# -- artifact store -------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def atomic_write(path: Path, data: bytes | str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    tmp.write_bytes(data.encode() if isinstance(data, str) else data)
    os.replace(tmp, path)


class ArtifactStore:
    """Hash-verified cache of stage outputs under one directory."""

    def __init__(self, root):
        self.root = Path(root)

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def _manifest(self, name: str) -> Path:
        return self.root / f"{name}.manifest.json"

    def lookup(self, name: str, key: str) -> dict | None:
        mf = self._manifest(name)
        if not mf.is_file():
            return None
        meta = json.loads(mf.read_text())
        if meta.get("key") != key:
            return None
        for rel, digest in meta["files"].items():
            p = self.root / rel
            if not p.is_file() or _sha256(p) != digest:
                log.warning("artifact %s: %s failed verification; rebuilding", name, rel)
                return None
        return meta

    def record(self, name: str, key: str, files: list[Path], **extra) -> dict:
        meta = {"key": key, "files": {str(p.relative_to(self.root)): _sha256(p) for p in files}}
        meta.update(extra)
        atomic_write(self._manifest(name), json.dumps(meta, sort_keys=True, indent=1))
        return meta


# -- stages ---------------------------------------------------------------


@dataclass
class DatasetBundle:
    ds: MobilityDataset
    truth_common: dict[int, int]  # user -> most common TRAIN location (ground truth for LocExtract)
    digest: str


def stage_dataset(cfg: ExperimentConfig, store: ArtifactStore) -> DatasetBundle:
    src = dict(cfg.dataset)
    key = _hash({"dataset": src, "preprocess": asdict(cfg.preprocess),
                 "input": _sha256(Path(src["path"])) if src["source"] != "synth" else None})
    path = store.path("dataset.json")
    truth_path = store.path("truth.json")
    meta = store.lookup("dataset", key)
    if meta is None:
        if src["source"] == "synth":
            extra = {k: v for k, v in src.items() if k not in ("source", "n_users", "n_locations", "n_days", "seed")}
            ds, gt = synth_generate(src["n_users"], src["n_locations"], src["n_days"], src["seed"], **extra)
            truth = {u: l for u, l in enumerate(gt.most_common)}
        else:
            if src["source"] == "file":
                fmt = RecordFormat(src.get("delimiter", ","), src.get("time_format"), src.get("header", False))
                ds = preprocess(load_checkins(src["path"], fmt), cfg.preprocess)
            else:
                ds = MobilityDataset.load(src["path"])
            truth = ds.most_common_locations((TRAIN,))
        atomic_write(path, ds.to_json())
        atomic_write(truth_path, json.dumps({str(u): l for u, l in truth.items()}, sort_keys=True))
        store.record("dataset", key, [path, truth_path])
    ds = MobilityDataset.load(path)
    truth = {int(u): int(l) for u, l in json.loads(truth_path.read_text()).items()}
    return DatasetBundle(ds, truth, ds.digest())


@dataclass
class VictimBundle:
    model: PoiModel
    snapshots: dict[int, PoiModel]
    log_rows: list[str]
    duration: float
    key: str


def _train_cached(store: ArtifactStore, name: str, key: str, build: Callable[[], tuple[PoiModel, TrainResult]],
                  snapshot_epochs=()) -> VictimBundle:
    ckpt = store.path(f"{name}.ckpt")
    logf = store.path(f"{name}_log.csv")
    snap_paths = {e: store.path(f"{name}_e{e}.ckpt") for e in snapshot_epochs}
    meta = store.lookup(name, key)
    if meta is None:
        t0 = time.perf_counter()
        model, res = build()
        duration = time.perf_counter() - t0
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        model.save(ckpt)
        atomic_write(logf, "\n".join(res.log_rows()) + "\n")
        for e, p in snap_paths.items():
            if e in res.snapshots:
                m = model.copy()
                m.load_flat(res.snapshots[e])
                m.epoch = e
                m.save(p)
        files = [ckpt, logf] + [p for p in snap_paths.values() if p.is_file()]
        meta = store.record(name, key, files, duration=duration)
    snaps = {e: PoiModel.load(p) for e, p in snap_paths.items() if p.is_file()}
    return VictimBundle(PoiModel.load(ckpt), snaps, logf.read_text().splitlines(), meta["duration"], key)


def stage_victim(cfg: ExperimentConfig, seed: int, data: DatasetBundle, store: ArtifactStore) -> VictimBundle:
    mcfg = dataclasses.replace(cfg.model, seed=seed)
    tcfg = dataclasses.replace(cfg.train, seed=seed)
    key = _hash({"data": data.digest, "model": asdict(mcfg), "train": asdict(tcfg)})

    def build():
        m = PoiModel(data.ds.n_users, data.ds.n_locations, mcfg)
        return m, train(m, data.ds, tcfg)

    return _train_cached(store, f"seed_{seed}/victim", key, build, tcfg.snapshot_epochs)


def stage_locextract(cfg: ExperimentConfig, seed: int, data: DatasetBundle, model: PoiModel,
                     ks=(1, 5, 10)) -> tuple[dict, list[str]]:
    lcfg = dataclasses.replace(cfg.locextract, seed=seed)
    ks = sorted({k for k in ks if k <= max(ks)} | {lcfg.top_k})
    depth = max(ks)
    run_cfg = dataclasses.replace(lcfg, top_k=depth)
    users = sorted(data.truth_common)
    preds = {u: loc_extract(model, u, run_cfg) for u in users}
    ev = extraction_asr(preds, data.truth_common, ks)
    rows = ["user,truth,ranked," + ",".join(f"hit@{k}" for k in ks)]
    for i, u in enumerate(users):
        rows.append(f"{u},{data.truth_common[u]},{' '.join(map(str, preds[u]))},"
                    + ",".join(str(int(ev.hits[k][i])) for k in ks))
    metrics = {f"asr@{k}": ev.asr[k] for k in ks}
    metrics["random_baseline@1"] = 1.0 / data.ds.n_locations
    return metrics, rows


def trajextract_targets(ds: MobilityDataset, length: int, n_targets: int, seed: int):
    windows = training_windows(ds.split(TRAIN), length)
    keys = sorted(windows)
    if not keys:
        raise ConfigError(f"no training trajectory has length >= {length}")
    rng = np.random.default_rng([seed, 0x7E])
    pick = rng.choice(len(keys), size=min(n_targets, len(keys)), replace=False)
    return [keys[i] for i in sorted(pick)], windows


def stage_trajextract(cfg: ExperimentConfig, seed: int, data: DatasetBundle, model: PoiModel) -> tuple[dict, list[str]]:
    tcfg = dataclasses.replace(cfg.trajextract, seed=seed)
    targets, windows = trajextract_targets(data.ds, tcfg.target_length, cfg.trajextract_run.n_targets, seed)
    preds = {t: [seq for seq, _ in traj_extract(model, t[0], t[1], tcfg)] for t in targets}
    ks = sorted({1, tcfg.n_out})
    ev = extraction_asr(preds, {t: windows[t] for t in targets}, ks)
    rows = ["user,start,top1," + ",".join(f"hit@{k}" for k in ks)]
    for i, t in enumerate(targets):
        rows.append(f"{t[0]},{t[1]},{' '.join(map(str, preds[t][0]))},"
                    + ",".join(str(int(ev.hits[k][i])) for k in ks))
    metrics = {f"asr@{k}": ev.asr[k] for k in ks}
    return metrics, rows


@dataclass
class MiaTargets:
    traj: list[Trajectory]
    traj_labels: np.ndarray
    loc: list[LocTarget]
    loc_labels: np.ndarray
    carriers: list[Trajectory]
    shadow_data: list[Trajectory]


def select_mia_targets(cfg: ExperimentConfig, seed: int, ds: MobilityDataset) -> MiaTargets:
    rng = np.random.default_rng([seed, 0x31A])
    train_trajs = ds.split(TRAIN)
    traj, traj_labels = [], np.zeros(0)
    member_idx: set[int] = set()
    if "trajmia" in cfg.attacks:
        nonmem = ds.split(VALID) + ds.split(TEST)
        n = len(nonmem) if cfg.trajmia.n_targets is None else min(cfg.trajmia.n_targets, len(nonmem))
        n = min(n, len(train_trajs))
        mem = rng.choice(len(train_trajs), size=n, replace=False)
        non = rng.choice(len(nonmem), size=n, replace=False)
        member_idx = set(mem.tolist())
        traj = [train_trajs[i] for i in mem] + [nonmem[i] for i in non]
        traj_labels = np.r_[np.ones(n), np.zeros(n)]
    shadow_data = [t for i, t in enumerate(train_trajs) if i not in member_idx]
    loc, loc_labels, carriers = [], np.zeros(0), []
    if "locmia" in cfg.attacks:
        seen_all = {(t.user_id, l) for t in ds.trajectories for l in t.locations}
        members = sorted(loc_targets_from(ds))
        n = min(cfg.locmia.n_targets, len(members))
        mem = [members[i] for i in np.sort(rng.choice(len(members), size=n, replace=False))]
        non: list[tuple[int, int]] = []
        while len(non) < n:
            u, l = int(rng.integers(ds.n_users)), int(rng.integers(ds.n_locations))
            if (u, l) not in seen_all and (u, l) not in non:
                non.append((u, l))
        loc = [LocTarget(u, l) for u, l in mem + non]
        loc_labels = np.r_[np.ones(n), np.zeros(n)]
        carriers = [synthesize_carrier(t, shadow_data, cfg.locmia.carrier_time, seed, day=f"carrier-{i}")
                    for i, t in enumerate(loc)]
    return MiaTargets(traj, traj_labels, loc, loc_labels, carriers, shadow_data)


def _n_shadow(cfg: ExperimentConfig) -> int:
    ns = {cfg.trajmia.n_shadow if "trajmia" in cfg.attacks else None,
          cfg.locmia.n_shadow if "locmia" in cfg.attacks else None} - {None}
    if len(ns) > 1:
        raise ConfigError("locmia and trajmia share one shadow ensemble; use one n_shadow")
    return ns.pop()


def stage_shadows(cfg: ExperimentConfig, seed: int, data: DatasetBundle, targets: MiaTargets,
                  store: ArtifactStore) -> ShadowEnsemble:
    """One ensemble serves both MIAs: every target trajectory and carrier gets its own IN/OUT roles."""
    n_shadow = _n_shadow(cfg)
    plan = plan_shadows(targets.shadow_data, targets.traj + targets.carriers, n_shadow, seed)
    mcfg = cfg.model
    key = _hash({"data": data.digest, "manifest": plan.manifest(), "model": asdict(mcfg),
                 "train": asdict(cfg.shadow_train)})
    name = f"seed_{seed}/shadows"
    d = store.path(name)
    meta = store.lookup(name, key)
    if meta is None:
        ens = train_shadows(plan, data.ds.n_users, data.ds.n_locations, mcfg, cfg.shadow_train, cfg.workers)
        ens.save(d)
        files = sorted(d.glob("slot_*.ckpt")) + [d / "plan.json"]
        store.record(name, key, files, duration=float(sum(ens.durations)))
        return ens
    models = [PoiModel.load(d / f"slot_{s:03d}.ckpt") for s in range(plan.n_slots)]
    return ShadowEnsemble(plan, models, json.loads((d / "plan.json").read_text())["durations"],
                          [{} for _ in models])


def stage_null_victim(cfg: ExperimentConfig, seed: int, data: DatasetBundle, targets: MiaTargets,
                      store: ArtifactStore) -> VictimBundle:
    """A victim trained only on a 50% sample of the shadow data, so no target is a member."""
    mcfg = dataclasses.replace(cfg.model, seed=seed + 10_000)
    tcfg = dataclasses.replace(cfg.train, seed=seed + 10_000, snapshot_epochs=())
    rng = np.random.default_rng([seed, 0x9011])
    pool = targets.shadow_data
    pick = np.sort(rng.choice(len(pool), size=len(pool) // 2, replace=False))
    subset = [pool[i] for i in pick]
    key = _hash({"data": data.digest, "model": asdict(mcfg), "train": asdict(tcfg), "subset": pick.tolist()})

    def build():
        m = PoiModel(data.ds.n_users, data.ds.n_locations, mcfg)
        return m, train(m, subset, tcfg, valid=data.ds.split(VALID))

    return _train_cached(store, f"seed_{seed}/null_victim", key, build)


def _mia_rows(ids: list[str], labels, results) -> list[str]:
    rows = ["target,label,conf_obs,mu_in,sigma_in,mu_out,sigma_out,log_lambda,lambda"]
    for tid, y, r in zip(ids, labels, results):
        vals = (r.conf_obs, r.mu_in, r.var_in ** 0.5, r.mu_out, r.var_out ** 0.5, r.log_lambda, r.lam)
        rows.append(f"{tid},{int(y)}," + ",".join(repr(float(v)) for v in vals))
    return rows


def score_trajmia(cfg: ExperimentConfig, targets: MiaTargets, shadows: ShadowEnsemble, victims: dict[str, PoiModel]):
    tg = [TrajTarget.of(t) for t in targets.traj]
    rows_n = len(tg)
    sh = np.array([traj_confidences(m, tg) for m in shadows.models])
    membership = shadows.plan.membership[:rows_n]
    phi = PHIS[cfg.trajmia.phi]
    out = {}
    for name, v in victims.items():
        res = lira_scores(traj_confidences(v, tg), sh, membership, phi)
        out[name] = res
    return out


def score_locmia(cfg: ExperimentConfig, targets: MiaTargets, shadows: ShadowEnsemble, victims: dict[str, PoiModel],
                 seed: int):
    scfg = SpaTemConfig(cfg.locmia.n_t, cfg.locmia.n_l, seed)
    offset = len(targets.traj)
    membership = shadows.plan.membership[offset:offset + len(targets.loc)]
    sh = np.array([spa_tem_scores(m, targets.loc, scfg) for m in shadows.models])
    phi = PHIS[cfg.locmia.phi]
    return {name: lira_scores(spa_tem_scores(v, targets.loc, scfg), sh, membership, phi)
            for name, v in victims.items()}


def stage_analyze(data: DatasetBundle, targets: MiaTargets, results, n_bins: int = 10) -> tuple[dict, list[str]]:
    """Group users into percentile bins of each aggregate statistic; log-mean Lambda of their member targets."""
    stats = compute_aggregate_stats(data.ds, data.ds.split(TRAIN))
    members = np.flatnonzero(targets.traj_labels == 1)
    loglam = np.array([results[i].log_lambda for i in members])
    users = np.array([targets.traj[i].user_id for i in members])
    active = stats.user["n_trajectories"] > 0
    out, rows = {}, ["statistic,bin,lower,upper,count,log_mean_lambda"]
    for name in USER_STATS:
        pop = stats.user[name][active]
        bins = vulnerability_binning(stats.user[name][users], loglam, min(n_bins, len(pop)), log_signal=True,
                                     population=pop)
        out[name] = {"edges": bins.edges.tolist(), "counts": bins.counts.tolist(),
                     "log_mean_lambda": [None if np.isnan(m) else float(m) for m in bins.means]}
        for b in range(len(bins.means)):
            rows.append(f"{name},{b},{float(bins.edges[b])!r},{float(bins.edges[b + 1])!r},{int(bins.counts[b])},"
                        f"{float(bins.means[b])!r}")
    return out, rows


# -- defenses -------------------------------------------------------------


def train_defended(cfg: ExperimentConfig, spec: DefenseSpec, seed: int, data: DatasetBundle,
                   store: ArtifactStore) -> VictimBundle:
    mcfg = dataclasses.replace(cfg.model, seed=seed)
    tcfg = dataclasses.replace(cfg.train, seed=seed, snapshot_epochs=())
    epochs = spec.epochs or tcfg.epochs
    scope, frac = scope_fraction(spec.protect)
    key = _hash({"data": data.digest, "model": asdict(mcfg), "train": asdict(tcfg), "spec": asdict(spec)})
    ds = data.ds

    def build():
        dp = DpConfig(spec.eps, spec.delta, spec.clip, seed)
        if spec.mechanism == "none":
            m = PoiModel(ds.n_users, ds.n_locations, mcfg)
            return m, train(m, ds, tcfg)
        if spec.mechanism == "l2":
            m = PoiModel(ds.n_users, ds.n_locations, mcfg)
            return m, train(m, ds, overfit_controls(tcfg, weight_decay=spec.weight_decay))
        if spec.mechanism == "early-stop":
            m = PoiModel(ds.n_users, ds.n_locations, mcfg)
            return m, train(m, ds, overfit_controls(tcfg, early_stop_patience=spec.patience))
        if spec.mechanism == "dpsgd":
            m = PoiModel(ds.n_users, ds.n_locations, mcfg)
            return m, train(m, ds, dataclasses.replace(tcfg, epochs=epochs), step_hook=dpsgd_hook(dp))
        prot = protected_set(ds, ATTACK_ITEMS[spec.attack], scope, frac, seed)
        if spec.mechanism == "jft":
            r = jft_train(ds, prot, dp, tcfg, dataclasses.replace(tcfg, epochs=epochs), mcfg)
            res = r.phase2 or r.phase1
            res.history = r.phase1.history + (r.phase2.history if r.phase2 else [])
            return r.model, res
        perturbed = geo_ind_perturb(ds, prot, GeoIndConfig(spec.eps_g, spec.radius, seed))
        m = PoiModel(ds.n_users, ds.n_locations, mcfg)
        return m, train(m, perturbed, tcfg)

    return _train_cached(store, f"seed_{seed}/defense_{spec.name}", key, build)


def stage_defenses(cfg: ExperimentConfig, seed: int, data: DatasetBundle, victim: PoiModel,
                   store: ArtifactStore) -> tuple[list[dict], list[str]]:
    """Utility and LocExtract ASR (ALL users and the TARGETED subset) per defense, plus the undefended row."""
    ds = data.ds
    fractions = [scope_fraction(s.protect)[1] for s in cfg.defenses if s.protect != "all"]
    targeted_items = protected_set(ds, ATTACK_ITEMS["locextract"], "targeted", fractions[0] if fractions else 0.3,
                                   seed).items
    users = sorted(data.truth_common)
    targeted = sorted({u for u, _ in targeted_items} & set(users))
    models = {"undefended": victim}
    for spec in cfg.defenses:
        models[spec.name] = train_defended(cfg, spec, seed, data, store).model
    lcfg = dataclasses.replace(cfg.locextract, seed=seed)

    def locextract_asr(model, _name):
        hit = {u: loc_extract(model, u, lcfg)[0] == data.truth_common[u] for u in users}
        return "asr@1", np.mean([hit[u] for u in users]), np.mean([hit[u] for u in targeted]) if targeted else np.nan

    records = tradeoff_eval(models, ds.split(TEST), {"locextract": locextract_asr})
    return [asdict(r) for r in records], [TRADEOFF_HEADER] + [r.row() for r in records]


# -- pipeline -------------------------------------------------------------


@dataclass
class AttackReport:
    attack: str
    per_seed: dict[int, dict[str, float]]
    mean: dict[str, float]
    provenance: dict

    def to_dict(self) -> dict:
        return {"attack": self.attack, "per_seed": {str(s): m for s, m in self.per_seed.items()},
                "mean": self.mean, "provenance": self.provenance}


def mean_metrics(per_seed: dict[int, dict[str, Any]]) -> dict[str, float]:
    keys = sorted(set.intersection(*(set(k for k, v in m.items() if isinstance(v, (int, float)))
                                     for m in per_seed.values())))
    return {k: float(np.mean([per_seed[s][k] for s in per_seed])) for k in keys}


@dataclass
class SeedResult:
    seed: int
    metrics: dict[str, dict]
    durations: dict[str, float]
    analysis: dict | None = None


def _write_rows(path: Path, rows: list[str]) -> None:
    atomic_write(path, "\n".join(rows) + "\n")


def run_seed(cfg: ExperimentConfig, seed: int, data: DatasetBundle, store: ArtifactStore,
             attacks: tuple[str, ...] | None = None, defend: bool = True) -> SeedResult:
    attacks = cfg.attacks if attacks is None else attacks
    sdir = store.path(f"seed_{seed}")
    metrics: dict[str, dict] = {}
    durations: dict[str, float] = {}

    def stage(name, fn):
        t0 = time.perf_counter()
        try:
            out = fn()
        except (ConfigError, DatasetError):
            raise
        except Exception as exc:
            atomic_write(sdir / "FAILED", f"{name}: {exc}\n")
            raise PipelineError(name, exc) from exc
        durations[name] = time.perf_counter() - t0
        return out

    victim = stage("train", lambda: stage_victim(cfg, seed, data, store))
    durations["train"] = victim.duration
    acc = evaluate_topk(victim.model, data.ds.split(TEST), (1, 5, 10))
    metrics["victim"] = {f"test_top{k}": v for k, v in acc.items()}

    if "locextract" in attacks:
        m, rows = stage("locextract", lambda: stage_locextract(cfg, seed, data, victim.model))
        _write_rows(sdir / "locextract.csv", rows)
        metrics["locextract"] = m
    if "trajextract" in attacks:
        m, rows = stage("trajextract", lambda: stage_trajextract(cfg, seed, data, victim.model))
        _write_rows(sdir / "trajextract.csv", rows)
        metrics["trajextract"] = m

    analysis = None
    if {"locmia", "trajmia"} & set(attacks):
        # shadows only cover the MIAs requested now; their cache key follows the plan
        sub = dataclasses.replace(cfg, attacks=tuple(a for a in cfg.attacks if a in ("locmia", "trajmia")
                                                     and a in attacks))
        targets = stage("mia-targets", lambda: select_mia_targets(sub, seed, data.ds))
        shadows = stage("shadows", lambda: stage_shadows(sub, seed, data, targets, store))
        durations["shadows"] = float(sum(shadows.durations))
        if "trajmia" in attacks and "trajmia" in cfg.attacks:
            victims = {"victim": victim.model}
            victims.update({f"victim@{e}": m for e, m in victim.snapshots.items()})
            if cfg.trajmia.null_experiment:
                null = stage("null-victim", lambda: stage_null_victim(cfg, seed, data, targets, store))
                durations["null-victim"] = null.duration
                victims["null"] = null.model
            res = stage("trajmia", lambda: score_trajmia(cfg, targets, shadows, victims))
            ids = [f"u{t.user_id}:{t.day}:{t.split}" for t in targets.traj]
            _write_rows(sdir / "trajmia.csv", _mia_rows(ids, targets.traj_labels, res["victim"]))
            m = _mia_metrics(res["victim"], targets.traj_labels)
            for name, r in res.items():
                if name != "victim":
                    m[f"auc[{name}]"] = _mia_metrics(r, targets.traj_labels)["auc"]
            metrics["trajmia"] = m
            analysis, rows = stage("analyze", lambda: stage_analyze(data, targets, res["victim"]))
            _write_rows(sdir / "analysis_user_bins.csv", rows)
        if "locmia" in attacks and "locmia" in cfg.attacks:
            res = stage("locmia", lambda: score_locmia(cfg, targets, shadows, {"victim": victim.model}, seed))
            ids = [f"{t.user}:{t.location}" for t in targets.loc]
            _write_rows(sdir / "locmia.csv", _mia_rows(ids, targets.loc_labels, res["victim"]))
            metrics["locmia"] = _mia_metrics(res["victim"], targets.loc_labels)

    if defend and cfg.defenses:
        recs, rows = stage("defend", lambda: stage_defenses(cfg, seed, data, victim.model, store))
        _write_rows(sdir / "defenses.csv", rows)
        metrics["defenses"] = {r["defense"]: {k: v for k, v in r.items() if k != "defense"} for r in recs}
    atomic_write(sdir / "report.json", json.dumps({"seed": seed, "metrics": metrics, "analysis": analysis},
                                                  sort_keys=True, indent=1))
    return SeedResult(seed, metrics, durations, analysis)


def _mia_metrics(results, labels) -> dict[str, float]:
    scores = np.array([r.log_lambda for r in results])
    ev = mia_eval(scores, labels, (0.01, 0.1))
    out = {"auc": ev.auc, "acc": ev.acc, "n_targets": float(len(scores))}
    for lv, v in ev.tpr_at_fpr.items():
        out[f"tpr@{lv:g}fpr"] = v
    return out


def output_dir(cfg: ExperimentConfig) -> Path:
    return Path(os.environ.get(OUTPUT_ENV) or cfg.output_dir)


def run_pipeline(cfg: ExperimentConfig, attacks: tuple[str, ...] | None = None,
                 defend: bool = True) -> dict[str, AttackReport]:
    """Run every configured stage for every seed and write per-seed and mean reports."""
    store = ArtifactStore(output_dir(cfg))
    store.root.mkdir(parents=True, exist_ok=True)
    atomic_write(store.path("config.json"), cfg.to_json())
    try:
        data = stage_dataset(cfg, store)
    except (ConfigError, DatasetError):
        raise
    except Exception as exc:
        raise PipelineError("dataset", exc) from exc
    seeds = cfg.seed_list()
    if cfg.workers > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(lambda s: run_seed(cfg, s, data, store, attacks, defend), seeds))
    else:
        results = [run_seed(cfg, s, data, store, attacks, defend) for s in seeds]
    return write_reports(cfg, store, data, results)


def write_reports(cfg: ExperimentConfig, store: ArtifactStore, data: DatasetBundle,
                  results: list[SeedResult]) -> dict[str, AttackReport]:
    reports = {}
    names = sorted(set.intersection(*(set(r.metrics) for r in results)))
    for name in names:
        if name == "defenses":
            per_seed = {}
            for r in results:
                for d, m in r.metrics[name].items():
                    per_seed.setdefault(r.seed, {}).update({f"{d}.{k}": v for k, v in m.items()})
        else:
            per_seed = {r.seed: r.metrics[name] for r in results}
        prov = {"config_sha256": cfg.digest(), "dataset_sha256": data.digest,
                "checkpoints": {str(r.seed): _ckpt_id(store, r.seed) for r in results}}
        reports[name] = AttackReport(name, per_seed, mean_metrics(per_seed), prov)
    doc = {"config": cfg.to_dict(), "dataset": list(dataset_stats(data.ds).as_row()),
           "reports": {k: v.to_dict() for k, v in reports.items()}}
    doc["config"].pop("output_dir")
    atomic_write(store.path("report.json"), json.dumps(doc, sort_keys=True, indent=1))
    return reports


def _ckpt_id(store: ArtifactStore, seed: int) -> str | None:
    p = store.path(f"seed_{seed}", "victim.ckpt")
    return _sha256(p) if p.is_file() else None


def load_seed_durations(store: ArtifactStore, seed: int) -> dict[str, float]:
    """Recorded build durations of a seed's cached training artifacts."""
    out = {}
    for name in ("victim", "null_victim", "shadows"):
        mf = store.path(f"seed_{seed}", f"{name}.manifest.json")
        if mf.is_file():
            out[name] = json.loads(mf.read_text()).get("duration", 0.0)
    return out


# -- sweeps ---------------------------------------------------------------


SWEEP_AXES: dict[str, tuple[str, str, Callable[[ExperimentConfig, Any], ExperimentConfig]]] = {
    "query_budget": ("locextract", "asr@1",
                     lambda c, v: c.with_overrides(locextract=dataclasses.replace(c.locextract, query_budget=int(v)))),
    "query_timestamp": ("locextract", "asr@1",
                        lambda c, v: c.with_overrides(
                            locextract=dataclasses.replace(c.locextract, query_timestamp=float(v)))),
    "voting": ("locextract", "asr@1",
               lambda c, v: c.with_overrides(locextract=dataclasses.replace(c.locextract, voting=str(v)))),
    "beam_width": ("trajextract", "asr@1",
                   lambda c, v: c.with_overrides(trajextract=dataclasses.replace(c.trajextract, beam_width=int(v),
                                                                                 top_beta_out=None))),
    "traj_length": ("trajextract", "asr@1",
                    lambda c, v: c.with_overrides(
                        trajextract=dataclasses.replace(c.trajextract, target_length=int(v)))),
    "shadow_count": ("trajmia", "auc",
                     lambda c, v: c.with_overrides(trajmia=dataclasses.replace(c.trajmia, n_shadow=int(v)),
                                                   locmia=dataclasses.replace(c.locmia, n_shadow=int(v)))),
    "nt": ("locmia", "auc", lambda c, v: c.with_overrides(locmia=dataclasses.replace(c.locmia, n_t=int(v)))),
    "nl": ("locmia", "auc", lambda c, v: c.with_overrides(locmia=dataclasses.replace(c.locmia, n_l=int(v)))),
    "epochs": ("trajmia", "auc",
               lambda c, v: c.with_overrides(train=dataclasses.replace(c.train, epochs=int(v),
                                                                       snapshot_epochs=()))),
}


def ablation_sweep(cfg: ExperimentConfig, axis: str, values, attack: str | None = None) -> list[str]:
    """One pipeline run per value (shared seeds, cached upstream stages); rows of (value, mean metric)."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    default_attack, metric, apply = SWEEP_AXES[axis]
    attack = attack or default_attack
    if attack not in cfg.attacks:
        raise ConfigError(f"axis {axis!r} needs attack {attack!r}, which is not configured")
    if axis in ("nt", "nl") and attack != "locmia":
        raise ConfigError(f"axis {axis!r} only applies to locmia")
    base_root = output_dir(cfg)
    rows = [f"{axis},{attack}.{metric}"]
    for v in values:
        vcfg = apply(cfg, v)
        only = (attack,)
        vcfg = dataclasses.replace(vcfg, attacks=tuple(a for a in vcfg.attacks if a in only))
        store = ArtifactStore(base_root)
        data = stage_dataset(vcfg, store)
        results = [run_seed(vcfg, s, data, store, only, defend=False) for s in vcfg.seed_list()]
        mean = float(np.mean([r.metrics[attack][metric] for r in results]))
        rows.append(f"{v},{mean!r}")
    atomic_write(base_root / f"sweep_{axis}.csv", "\n".join(rows) + "\n")
    return rows
