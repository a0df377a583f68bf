"""Likelihood-ratio membership inference (LocMIA / TrajMIA) with shadow models."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import TRAIN, MobilityDataset, Trajectory
from .model.network import PROB_FLOOR, ModelConfig, PoiModel, SequenceBatch, softmax
from .model.training import TrainConfig, train

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-12
PHI_CLAMP = 1e-9
PLAN_FORMAT = "poiaudit.shadow-plan/1"


class ConfigError(ValueError):
    pass


class StatisticsError(ValueError):
    pass


@dataclass(frozen=True)
class LocTarget:
    user: int
    location: int


@dataclass(frozen=True)
class TrajTarget:
    user: int
    locations: tuple[int, ...]
    times: tuple[float, ...]

    def __post_init__(self):
        if len(self.locations) < 2:
            raise ValueError("trajectory targets need length >= 2")
        if len(self.locations) != len(self.times):
            raise ValueError("locations and times differ in length")

    @property
    def user_id(self) -> int:
        return self.user

    @classmethod
    def of(cls, traj: Trajectory) -> "TrajTarget":
        return cls(traj.user_id, tuple(traj.locations), tuple(traj.times))


@dataclass(frozen=True)
class SpaTemConfig:
    n_t: int = 10
    n_l: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.n_t < 1 or self.n_l < 1:
            raise ValueError("n_t and n_l must be >= 1")


# -- scoring --------------------------------------------------------------


def spa_tem_locations(n_locations: int, target: LocTarget, cfg: SpaTemConfig) -> np.ndarray:
    """The (n_t, n_l) random query locations for ``target``; identical for every model."""
    rng = np.random.default_rng([cfg.seed, target.user, target.location])
    return rng.integers(0, n_locations, size=(cfg.n_t, cfg.n_l))


def spa_tem_timestamps(n_t: int) -> np.ndarray:
    return np.arange(n_t) / n_t


def spa_tem_reduce(probs: np.ndarray) -> float:
    """Mean over the random locations of each timestamp, then max over timestamps."""
    return float(np.max(np.mean(probs, axis=1)))


def spa_tem_query(model, target: LocTarget, cfg: SpaTemConfig | None = None,
                  query_locations: np.ndarray | None = None) -> float:
    cfg = cfg or SpaTemConfig()
    if not (0 <= target.user < model.n_users and 0 <= target.location < model.n_locations):
        raise IndexError("target indices out of range")
    locs = spa_tem_locations(model.n_locations, target, cfg) if query_locations is None else query_locations
    locs = np.asarray(locs, dtype=np.int64)
    n_t, n_l = locs.shape
    times = np.repeat(spa_tem_timestamps(n_t), n_l)
    logits = model.query(np.full(n_t * n_l, target.user), locs.reshape(-1, 1), times[:, None])
    probs = softmax(logits)[:, target.location].reshape(n_t, n_l)
    return spa_tem_reduce(probs)


def spa_tem_scores(model, targets: Sequence[LocTarget], cfg: SpaTemConfig, chunk: int = 40) -> np.ndarray:
    """``spa_tem_query`` for many targets, batching their queries."""
    out = np.empty(len(targets))
    per = cfg.n_t * cfg.n_l
    times = np.repeat(spa_tem_timestamps(cfg.n_t), cfg.n_l)
    for s in range(0, len(targets), chunk):
        part = targets[s:s + chunk]
        locs = np.concatenate([spa_tem_locations(model.n_locations, t, cfg).ravel() for t in part])
        users = np.repeat([t.user for t in part], per)
        logits = model.query(users, locs[:, None], np.tile(times, len(part))[:, None])
        probs = softmax(logits)[np.arange(len(users)), np.repeat([t.location for t in part], per)]
        for i, block in enumerate(probs.reshape(len(part), cfg.n_t, cfg.n_l)):
            out[s + i] = spa_tem_reduce(block)
    return out


def traj_confidence(model, target: TrajTarget) -> float:
    """Mean probability of each next location given its prefix."""
    return float(traj_confidences(model, [target])[0])


def traj_confidences(model, targets: Sequence[TrajTarget], chunk: int = 512) -> np.ndarray:
    out = np.empty(len(targets))
    for s in range(0, len(targets), chunk):
        part = targets[s:s + chunk]
        batch = SequenceBatch.from_trajectories(part)
        logits = model.prefix_logits(batch.users, batch.locs, batch.times, batch.lengths)
        for i, t in enumerate(part):
            n = len(t.locations)
            p = softmax(logits[i, :n - 1])[np.arange(n - 1), np.asarray(t.locations[1:])]
            out[s + i] = np.maximum(p, PROB_FLOOR).mean()
    return out


def phi_logit(p):
    p = np.clip(p, PHI_CLAMP, 1.0 - PHI_CLAMP)
    return np.log(p) - np.log1p(-p)


def phi_identity(p):
    return np.asarray(p, dtype=np.float64)


PHIS: dict[str, Callable] = {"logit": phi_logit, "identity": phi_identity}


# -- hypothesis test ------------------------------------------------------


def gaussian_logpdf(x, mu, var):
    return -0.5 * np.log(2.0 * np.pi * var) - (x - mu) ** 2 / (2.0 * var)


@dataclass(frozen=True)
class LiraResult:
    conf_obs: float
    mu_in: float
    mu_out: float
    var_in: float
    var_out: float
    log_lambda: float
    decision_threshold: float = 1.0

    @property
    def lam(self) -> float:
        """The likelihood ratio itself (may overflow to inf; rank by ``log_lambda``)."""
        return math.exp(self.log_lambda) if self.log_lambda < 709.0 else math.inf

    @property
    def is_member(self) -> bool:
        return self.log_lambda > math.log(self.decision_threshold)


def lira_from_scores(conf_obs: float, in_scores, out_scores, threshold: float = 1.0) -> LiraResult:
    """Fit one Gaussian per side and return the density ratio at ``conf_obs``.

    Scores are already transformed (phi applied).
    """
    ins = np.asarray(in_scores, dtype=np.float64)
    outs = np.asarray(out_scores, dtype=np.float64)
    if len(ins) < 2 or len(outs) < 2:
        raise StatisticsError("need at least 2 IN and 2 OUT shadow scores")
    mu_in, mu_out = ins.mean(), outs.mean()
    var_in = max(ins.var(ddof=1), VAR_FLOOR)
    var_out = max(outs.var(ddof=1), VAR_FLOOR)
    log_lam = gaussian_logpdf(conf_obs, mu_in, var_in) - gaussian_logpdf(conf_obs, mu_out, var_out)
    return LiraResult(float(conf_obs), float(mu_in), float(mu_out), float(var_in), float(var_out),
                      float(log_lam), threshold)


# -- shadow planning ------------------------------------------------------


@dataclass
class ShadowPlan:
    """2N slots over the shadow data, each target IN for exactly N of them."""

    n_models: int
    seed: int
    fraction: float
    base_indices: list[np.ndarray]  # per slot, indices into shadow_data
    membership: np.ndarray  # (n_targets, 2N) bool, True = IN
    shadow_data: list[Trajectory]
    items: list[Trajectory]  # per target, the trajectory inserted in IN slots

    @property
    def n_slots(self) -> int:
        return 2 * self.n_models

    def slot_seed(self, slot: int) -> int:
        return int(np.random.SeedSequence([self.seed, slot]).generate_state(1)[0])

    def training_set(self, slot: int) -> list[Trajectory]:
        # every target leaves the base sample; IN targets come back exactly once
        inserted = [self.items[i] for i in np.flatnonzero(self.membership[:, slot])]
        targets = {_key(t) for t in self.items}
        base = [self.shadow_data[i] for i in self.base_indices[slot]]
        return [t for t in base if _key(t) not in targets] + inserted

    def manifest(self) -> dict:
        return {
            "format": PLAN_FORMAT,
            "n_models": self.n_models,
            "seed": self.seed,
            "fraction": self.fraction,
            "slot_seeds": [self.slot_seed(s) for s in range(self.n_slots)],
            "base_indices": [b.tolist() for b in self.base_indices],
            "targets": [
                {"user": t.user_id, "locations": list(t.locations), "times": list(t.times),
                 "in_slots": np.flatnonzero(self.membership[i]).tolist()}
                for i, t in enumerate(self.items)
            ],
        }


def _key(t: Trajectory):
    return (t.user_id, t.locations, t.times, t.day)


def plan_shadows(shadow_data: Sequence[Trajectory], items: Sequence[Trajectory], n_models: int = 16,
                 seed: int = 0, fraction: float = 0.5) -> ShadowPlan:
    """Assign subsamples and IN/OUT roles for ``2 * n_models`` shadow slots.

    ``items`` are the trajectories whose presence is toggled: the target
    trajectories for TrajMIA, the synthetic carriers for LocMIA.
    """
    if n_models < 2:
        raise ConfigError("need n_models >= 2 (2N >= 4 shadow slots)")
    if not 0.0 < fraction <= 1.0:
        raise ConfigError("subsample fraction must lie in (0, 1]")
    shadow_data = list(shadow_data)
    size = int(round(fraction * len(shadow_data)))
    if size < 1:
        raise ConfigError(f"shadow data of {len(shadow_data)} trajectories is too small to subsample")
    rng = np.random.default_rng(seed)
    slots = 2 * n_models
    base = [np.sort(rng.choice(len(shadow_data), size=size, replace=False)) for _ in range(slots)]
    membership = np.zeros((len(items), slots), dtype=bool)
    for i in range(len(items)):
        membership[i, rng.permutation(slots)[:n_models]] = True
    return ShadowPlan(n_models, seed, fraction, base, membership, shadow_data, list(items))


def synthesize_carrier(target: LocTarget, shadow_data: Sequence[Trajectory], t_s: float = 0.5,
                       seed: int = 0, length: int = 3, day: str = "carrier") -> Trajectory:
    """Length-``length`` trajectory for ``target.user`` with the location in the middle.

    Context locations follow the POI marginal of ``shadow_data``.
    """
    if not shadow_data:
        raise ValueError("shadow data is empty")
    if length < 2:
        raise ValueError("carrier length must be >= 2")
    pool = np.fromiter((l for t in shadow_data for l in t.locations), dtype=np.int64)
    rng = np.random.default_rng([seed, target.user, target.location])
    locs = [int(x) for x in pool[rng.integers(0, len(pool), size=length)]]
    locs[length // 2] = target.location
    return Trajectory(target.user, tuple(locs), (float(t_s),) * length, TRAIN, day)


# -- ensembles ------------------------------------------------------------


@dataclass
class ShadowEnsemble:
    plan: ShadowPlan
    models: list[PoiModel]
    durations: list[float]
    snapshots: list[dict[int, np.ndarray]]

    def at_epoch(self, epoch: int) -> list[PoiModel]:
        """Models restored to an intermediate snapshot (falls back to final weights)."""
        out = []
        for m, snaps in zip(self.models, self.snapshots):
            if epoch in snaps:
                m = m.copy()
                m.load_flat(snaps[epoch])
            out.append(m)
        return out

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for slot, m in enumerate(self.models):
            m.save(d / f"slot_{slot:03d}.ckpt")
        manifest = self.plan.manifest()
        manifest["durations"] = self.durations
        (d / "plan.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))


def _train_slot(plan: ShadowPlan, slot: int, n_users: int, n_locations: int, model_cfg: ModelConfig,
                train_cfg: TrainConfig):
    t0 = time.perf_counter()
    seed = plan.slot_seed(slot)
    model = PoiModel(n_users, n_locations, dataclasses.replace(model_cfg, seed=seed))
    res = train(model, plan.training_set(slot), dataclasses.replace(train_cfg, seed=seed, evaluate=False))
    return model, res.snapshots, time.perf_counter() - t0


def train_shadows(plan: ShadowPlan, n_users: int, n_locations: int, model_cfg: ModelConfig | None = None,
                  train_cfg: TrainConfig | None = None, workers: int = 1) -> ShadowEnsemble:
    """Train every slot; slots are independent so they may run on a thread pool."""
    model_cfg = model_cfg or ModelConfig()
    train_cfg = train_cfg or TrainConfig(epochs=50)
    args = [(plan, s, n_users, n_locations, model_cfg, train_cfg) for s in range(plan.n_slots)]
    if workers <= 1:
        results = [_train_slot(*a) for a in args]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda a: _train_slot(*a), args))
    models, snaps, durations = zip(*results)
    return ShadowEnsemble(plan, list(models), list(durations), list(snaps))


def lira_scores(victim_scores: np.ndarray, shadow_scores: np.ndarray, membership: np.ndarray,
                phi: Callable = phi_logit, threshold: float = 1.0) -> list[LiraResult]:
    """Per-target LiRA from raw scores: victim (n_targets,), shadows (2N, n_targets)."""
    obs = phi(victim_scores)
    sh = phi(shadow_scores)
    return [lira_from_scores(obs[i], sh[membership[i], i], sh[~membership[i], i], threshold)
            for i in range(len(obs))]


def lira_test(victim, target: LocTarget | TrajTarget, plan: ShadowPlan, shadows: Sequence[PoiModel],
              scorer: Callable | None = None, phi: Callable = phi_logit, target_index: int | None = None,
              threshold: float = 1.0) -> LiraResult:
    """LiRA for one target whose IN/OUT roles are row ``target_index`` of the plan."""
    if scorer is None:
        scorer = traj_confidence if isinstance(target, TrajTarget) else spa_tem_query
    if target_index is None:
        raise ValueError("target_index locates the target's row in the plan")
    if len(shadows) != plan.n_slots:
        raise ValueError("one trained model per plan slot is required")
    scores = np.array([scorer(m, target) for m in shadows])
    row = plan.membership[target_index]
    obs = phi(scorer(victim, target))
    return lira_from_scores(float(obs), phi(scores[row]), phi(scores[~row]), threshold)


def loc_targets_from(ds: MobilityDataset | Sequence[Trajectory]) -> set[tuple[int, int]]:
    trajs = ds.split(TRAIN) if isinstance(ds, MobilityDataset) else ds
    return {(t.user_id, l) for t in trajs for l in t.locations}
