"""Privacy defenses: overfitting controls, DP-SGD, two-phase selective DP, geo-indistinguishability."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.spatial import cKDTree
from scipy.special import lambertw

from .data import TRAIN, MobilityDataset, Trajectory, unit_vectors
from .model.network import ModelConfig, PoiModel
from .model.training import TrainConfig, TrainResult, evaluate_topk, train

EARTH_RADIUS_M = 6371008.8
PROTECT_KINDS = ("common-location", "location-sequence", "user-location", "trajectory")
# which sensitive item each attack exposes
ATTACK_ITEMS = {"locextract": "common-location", "trajextract": "location-sequence",
                "locmia": "user-location", "trajmia": "trajectory"}


class DefenseError(ValueError):
    pass


# -- DP-SGD ---------------------------------------------------------------


@dataclass(frozen=True)
class DpConfig:
    epsilon: float
    delta: float = 1e-3
    clip_norm: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be > 0")

    @property
    def sigma(self) -> float:
        """Gaussian-mechanism noise multiplier for one (epsilon, delta) release."""
        return math.sqrt(2.0 * math.log(1.25 / self.delta)) / self.epsilon


def clip_rows(per_example: np.ndarray, clip_norm: float) -> np.ndarray:
    """Scale each row to global L2 norm at most ``clip_norm`` (guaranteed in floating point)."""
    g = np.array(per_example, dtype=np.float64)
    norms = np.linalg.norm(g, axis=1)
    over = norms > clip_norm
    g[over] *= (clip_norm / norms[over])[:, None]
    # rounding can leave a row a few ulps above the bound; shrink until it is not
    for _ in range(8):
        norms = np.linalg.norm(g, axis=1)
        over = norms > clip_norm
        if not over.any():
            break
        g[over] *= np.nextafter(clip_norm / norms[over], 0.0)[:, None]
    return g


class DpSgdHook:
    """Clip per-example gradients, average, add N(0, (sigma C / B)^2) per coordinate."""

    def __init__(self, cfg: DpConfig):
        self.cfg = cfg
        self.rng = np.random.default_rng([cfg.seed, 0xD9])
        self.steps = 0

    def noise_std(self, batch_size: int) -> float:
        return self.cfg.sigma * self.cfg.clip_norm / batch_size

    def __call__(self, per_example: np.ndarray) -> np.ndarray:
        if not np.all(np.isfinite(per_example)):
            raise DefenseError("non-finite per-example gradient")
        B = per_example.shape[0]
        clipped = clip_rows(per_example, self.cfg.clip_norm)
        self.steps += 1
        return clipped.mean(axis=0) + self.rng.normal(0.0, self.noise_std(B), per_example.shape[1])


def dpsgd_hook(cfg: DpConfig) -> DpSgdHook:
    return DpSgdHook(cfg)


def overfit_controls(cfg: TrainConfig, weight_decay: float | None = None,
                     early_stop_patience: int | None = None) -> TrainConfig:
    """L2 weight decay and/or early stopping on validation top-10 accuracy."""
    changes = {}
    if weight_decay is not None:
        changes["weight_decay"] = weight_decay
    if early_stop_patience is not None:
        changes["early_stop_patience"] = early_stop_patience
    return dataclasses.replace(cfg, **changes)


# -- protected sets -------------------------------------------------------


@dataclass(frozen=True)
class ProtectedSet:
    """Sensitive items of one kind.

    Location-like kinds hold ``(user, location)`` pairs; ``location-sequence``
    and ``trajectory`` hold ``(user, locations, times, day)`` keys of whole
    training trajectories.
    """

    kind: str
    items: frozenset = field(default_factory=frozenset)
    scope: str = "all"  # "all" | "targeted"
    fraction: float = 1.0

    def __post_init__(self):
        if self.kind not in PROTECT_KINDS:
            raise ValueError(f"unknown protected kind {self.kind!r}")
        if self.scope not in ("all", "targeted"):
            raise ValueError(f"unknown scope {self.scope!r}")

    @property
    def location_level(self) -> bool:
        return self.kind in ("common-location", "user-location")

    def __len__(self):
        return len(self.items)

    def covers_trajectory(self, t: Trajectory) -> bool:
        return _traj_key(t) in self.items

    def covers_checkin(self, user: int, location: int) -> bool:
        return (user, location) in self.items


def _traj_key(t: Trajectory):
    return (t.user_id, t.locations, t.times, t.day)


def sensitive_items(ds: MobilityDataset, kind: str) -> list:
    """Every sensitive item of ``kind`` present in the TRAIN split, in a stable order."""
    trajs = ds.split(TRAIN)
    if kind == "common-location":
        return sorted(ds.most_common_locations((TRAIN,)).items())
    if kind == "user-location":
        return sorted({(t.user_id, l) for t in trajs for l in t.locations})
    if kind in ("location-sequence", "trajectory"):
        return sorted({_traj_key(t) for t in trajs})
    raise ValueError(f"unknown protected kind {kind!r}")


def protected_set(ds: MobilityDataset, kind: str, scope: str = "all", fraction: float = 0.3,
                  seed: int = 0) -> ProtectedSet:
    items = sensitive_items(ds, kind)
    if scope == "all":
        return ProtectedSet(kind, frozenset(items), "all", 1.0)
    if not 0.0 < fraction <= 1.0:
        raise ValueError("targeted fraction must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    n = int(round(fraction * len(items)))
    pick = rng.choice(len(items), size=n, replace=False)
    return ProtectedSet(kind, frozenset(items[i] for i in pick), "targeted", fraction)


def redact(trajs: Sequence[Trajectory], protected: ProtectedSet, mask_id: int) -> list[Trajectory]:
    """Replace protected check-ins by ``mask_id`` or drop protected trajectories."""
    out = []
    for t in trajs:
        if protected.location_level:
            locs = tuple(mask_id if (t.user_id, l) in protected.items else l for l in t.locations)
            out.append(dataclasses.replace(t, locations=locs) if locs != t.locations else t)
        elif not protected.covers_trajectory(t):
            out.append(t)
    return out


# -- two-phase selective DP -----------------------------------------------


@dataclass
class JftResult:
    model: PoiModel
    phase1: TrainResult
    phase2: TrainResult | None
    redacted: list[Trajectory]


def jft_train(ds: MobilityDataset, protected: ProtectedSet, dp: DpConfig, phase1_cfg: TrainConfig,
              phase2_cfg: TrainConfig | None, model_cfg: ModelConfig | None = None) -> JftResult:
    """Phase I trains on a redacted copy of TRAIN; phase II fine-tunes on the original with DP-SGD.

    ``phase2_cfg=None`` skips the fine-tuning phase.
    """
    model = PoiModel(ds.n_users, ds.n_locations, model_cfg or ModelConfig(), mask_token=True)
    redacted = redact(ds.split(TRAIN), protected, model.mask_id)
    if not redacted:
        raise DefenseError("redaction removed every training trajectory")
    valid = ds.split("VALID")
    r1 = train(model, redacted, phase1_cfg, valid=valid)
    r2 = None
    if phase2_cfg is not None:
        r2 = train(model, ds.split(TRAIN), phase2_cfg, step_hook=dpsgd_hook(dp), valid=valid)
    return JftResult(model, r1, r2, redacted)


# -- geo-indistinguishability ---------------------------------------------


@dataclass(frozen=True)
class GeoIndConfig:
    epsilon_g: float = 0.01  # per meter
    radius_m: float = 400.0
    seed: int = 0

    def __post_init__(self):
        if not self.epsilon_g > 0:
            raise ValueError("epsilon_g must be > 0")
        if not self.radius_m > 0:
            raise ValueError("radius must be > 0")


def planar_laplace_radial_cdf(r, eps: float):
    """P(radius <= r) = 1 - (1 + eps r) exp(-eps r), in a form that keeps precision near 0."""
    x = eps * np.maximum(np.asarray(r, dtype=np.float64), 0.0)
    return -np.expm1(-x) - x * np.exp(-x)


def planar_laplace_radius(p, eps: float) -> np.ndarray:
    """Inverse of the radial CDF via the -1 branch of Lambert W.

    The closed form cancels badly as p -> 0 (and overflows as p -> 1), so
    results whose relative residual is not tight fall back to root finding.
    """
    p = np.atleast_1d(np.asarray(p, dtype=np.float64))
    with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
        r = -(np.real(lambertw((p - 1.0) / np.e, k=-1)) + 1.0) / eps
        resid = np.abs(planar_laplace_radial_cdf(r, eps) - p) / np.maximum(p, np.finfo(float).tiny)
    bad = ~np.isfinite(r) | (r < 0) | ~(resid <= 1e-10)
    for i in np.flatnonzero(bad):
        r[i] = _invert_radial(p[i], eps)
    return r


def _invert_radial(p: float, eps: float) -> float:
    if p <= 0.0:
        return 0.0
    if p >= 1.0:
        return math.inf
    hi = 1.0 / eps
    while planar_laplace_radial_cdf(hi, eps) < p:
        hi *= 2.0
    return brentq(lambda x: float(planar_laplace_radial_cdf(x, eps)) - p, 0.0, hi, xtol=1e-300, rtol=1e-15)


def sample_planar_laplace(n: int, eps: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """``n`` polar Laplace offsets in meters: (radius, angle)."""
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    radius = planar_laplace_radius(rng.random(n), eps)
    return radius, theta


def offset_coords(lat, lon, radius_m, theta):
    """Move points by ``radius_m`` meters in direction ``theta`` (east = 0) on a local tangent plane."""
    lat = np.asarray(lat, dtype=np.float64)
    dy = radius_m * np.sin(theta)
    dx = radius_m * np.cos(theta)
    dlat = np.degrees(dy / EARTH_RADIUS_M)
    dlon = np.degrees(dx / (EARTH_RADIUS_M * np.cos(np.radians(lat))))
    return lat + dlat, np.asarray(lon) + dlon


def snap_to_poi(coords: np.ndarray, lat, lon) -> np.ndarray:
    tree = cKDTree(unit_vectors(coords))
    pts = unit_vectors(np.column_stack([np.atleast_1d(lat), np.atleast_1d(lon)]))
    return tree.query(pts)[1]


def geo_ind_perturb(ds: MobilityDataset, protected: ProtectedSet, cfg: GeoIndConfig) -> MobilityDataset:
    """Perturb protected TRAIN check-ins with planar Laplace noise and snap to the nearest POI."""
    rng = np.random.default_rng(cfg.seed)
    coords = ds.coords
    out = []
    for t in ds.trajectories:
        if t.split != TRAIN:
            out.append(t)
            continue
        if protected.location_level:
            idx = [i for i, l in enumerate(t.locations) if (t.user_id, l) in protected.items]
        else:
            idx = list(range(len(t.locations))) if protected.covers_trajectory(t) else []
        if not idx:
            out.append(t)
            continue
        src = np.array([t.locations[i] for i in idx])
        radius, theta = sample_planar_laplace(len(idx), cfg.epsilon_g, rng)
        lat, lon = offset_coords(coords[src, 0], coords[src, 1], radius, theta)
        snapped = snap_to_poi(coords, lat, lon)
        locs = list(t.locations)
        for i, l in zip(idx, snapped):
            locs[i] = int(l)
        out.append(dataclasses.replace(t, locations=tuple(locs)))
    return ds.with_trajectories(out, geo_ind=dataclasses.asdict(cfg))


# -- trade-off ------------------------------------------------------------


@dataclass
class TradeoffRecord:
    defense: str
    top1: float
    top10: float
    attack: str
    metric: str
    value_all: float
    value_targeted: float

    def row(self) -> str:
        return (f"{self.defense},{self.top1!r},{self.top10!r},{self.attack},{self.metric},"
                f"{self.value_all!r},{self.value_targeted!r}")


TRADEOFF_HEADER = "defense,top1,top10,attack,metric,value_all,value_targeted"


def tradeoff_eval(models: dict[str, PoiModel], test: Sequence[Trajectory],
                  attacks: dict[str, Callable[[PoiModel, str], tuple[str, float, float]]]) -> list[TradeoffRecord]:
    """Utility on ``test`` plus each attack's metric on ALL and TARGETED items, per defense.

    Each attack callable receives ``(model, defense_name)`` and returns
    ``(metric_name, value_all, value_targeted)``.
    """
    records = []
    for name, model in models.items():
        acc = evaluate_topk(model, list(test), (1, 10))
        for attack, fn in attacks.items():
            metric, v_all, v_t = fn(model, name)
            records.append(TradeoffRecord(name, acc[1], acc[10], attack, metric, float(v_all), float(v_t)))
    return records
