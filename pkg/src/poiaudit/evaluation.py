"""Attack metrics and aggregate-statistics vulnerability analysis."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import logsumexp

from .data import MobilityDataset, Trajectory, chord_for_km, unit_vectors


class EvaluationError(ValueError):
    pass


# -- extraction -----------------------------------------------------------


@dataclass
class ExtractionEval:
    targets: list
    hits: dict[int, np.ndarray]
    asr: dict[int, float]

    def rows(self) -> list[str]:
        ks = sorted(self.hits)
        out = ["target," + ",".join(f"hit@{k}" for k in ks)]
        for i, t in enumerate(self.targets):
            out.append(f"{t}," + ",".join(str(int(self.hits[k][i])) for k in ks))
        return out


def extraction_asr(predictions: Mapping[Hashable, Sequence], ground_truth: Mapping[Hashable, object],
                   ks: Iterable[int] = (1,)) -> ExtractionEval:
    """Fraction of targets whose truth appears among the top-k predictions.

    A truth value may be a single item or a set of acceptable items (TrajExtract:
    every training window of the user that starts at the queried location).
    """
    ks = sorted(set(ks))
    if not ks or ks[0] < 1:
        raise EvaluationError("k values must be >= 1")
    targets = list(predictions)
    if not targets:
        raise EvaluationError("no predictions")
    hits = {k: np.zeros(len(targets), dtype=bool) for k in ks}
    for i, t in enumerate(targets):
        if t not in ground_truth:
            raise EvaluationError(f"missing ground truth for target {t!r}")
        truth = ground_truth[t]
        ok = truth if isinstance(truth, (set, frozenset)) else {truth}
        preds = [tuple(p) if isinstance(p, (list, np.ndarray)) else p for p in predictions[t]]
        for k in ks:
            hits[k][i] = any(p in ok for p in preds[:k])
    return ExtractionEval(targets, hits, {k: float(hits[k].mean()) for k in ks})


def training_windows(trajs: Iterable[Trajectory], length: int) -> dict[tuple[int, int], set[tuple[int, ...]]]:
    """Contiguous length-n location windows per (user, first location)."""
    out: dict[tuple[int, int], set] = defaultdict(set)
    for t in trajs:
        for s in range(len(t.locations) - length + 1):
            w = tuple(t.locations[s:s + length])
            out[(t.user_id, w[0])].add(w)
    return dict(out)


# -- membership -----------------------------------------------------------


@dataclass
class MiaEval:
    auc: float
    acc: float
    tpr_at_fpr: dict[float, float]
    fpr: np.ndarray
    tpr: np.ndarray
    n_members: int
    n_nonmembers: int

    def summary(self) -> dict:
        return {"auc": self.auc, "acc": self.acc, "n_members": self.n_members,
                "n_nonmembers": self.n_nonmembers,
                "tpr_at_fpr": {str(k): v for k, v in sorted(self.tpr_at_fpr.items())}}


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Empirical ROC, one point per distinct score (ties share a threshold).

    Returns ``(fpr, tpr, thresholds)`` starting at (0, 0) with threshold +inf.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape:
        raise EvaluationError("scores and labels differ in length")
    if np.isnan(s).any():
        raise EvaluationError("scores contain NaN")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("need both members and non-members")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(s[1:] != s[:-1]), len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    fpr = np.r_[0.0, fp / n_neg]
    tpr = np.r_[0.0, tp / n_pos]
    return fpr, tpr, np.r_[np.inf, s[last]]


def mia_eval(scores, labels, fpr_levels: Iterable[float] = (0.01, 0.1)) -> MiaEval:
    fpr, tpr, _ = roc_curve(scores, labels)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    acc = float(np.max((tpr * n_pos + (1.0 - fpr) * n_neg) / (n_pos + n_neg)))
    at = {float(lv): float(tpr[fpr <= lv + 1e-15].max()) for lv in fpr_levels}
    return MiaEval(auc, acc, at, fpr, tpr, n_pos, n_neg)


def balanced_indices(labels, seed: int = 0) -> np.ndarray:
    """Down-sample the majority class so members and non-members are equal in number."""
    y = np.asarray(labels).astype(bool)
    pos, neg = np.flatnonzero(y), np.flatnonzero(~y)
    n = min(len(pos), len(neg))
    rng = np.random.default_rng(seed)
    keep = np.r_[rng.choice(pos, n, replace=False), rng.choice(neg, n, replace=False)]
    return np.sort(keep)


# -- aggregate statistics -------------------------------------------------


USER_STATS = ("total_checkins", "unique_pois", "n_trajectories", "avg_traj_length")
LOCATION_STATS = ("distinct_users", "checkins_within_1km", "trajectories_with_poi", "mean_visit_time")
TRAJECTORY_STATS = ("users_sharing", "checkins_within_1km", "intercepting_trajectories", "mean_checkin_time")


@dataclass
class AggregateStats:
    user: dict[str, np.ndarray]  # each (n_users,)
    location: dict[str, np.ndarray]  # each (n_locations,)
    trajectory: dict[str, np.ndarray]  # each (n_trajectories,), aligned with ``trajectories``
    trajectories: list[Trajectory]

    def table(self, level: str) -> list[str]:
        cols = getattr(self, level)
        names = list(cols)
        n = len(next(iter(cols.values())))
        rows = ["index," + ",".join(names)]
        rows += [f"{i}," + ",".join(repr(float(cols[c][i])) for c in names) for i in range(n)]
        return rows


def neighbours_within(coords: np.ndarray, km: float = 1.0) -> list[list[int]]:
    """For each POI, the POIs within ``km`` great-circle distance (self included)."""
    tree = cKDTree(unit_vectors(coords))
    return [sorted(n) for n in tree.query_ball_point(unit_vectors(coords), chord_for_km(km))]


def compute_aggregate_stats(ds: MobilityDataset, trajectories: Sequence[Trajectory] | None = None,
                            radius_km: float = 1.0) -> AggregateStats:
    trajs = list(ds.trajectories if trajectories is None else trajectories)
    U, L = ds.n_users, ds.n_locations
    total = np.zeros(U)
    n_traj = np.zeros(U)
    uniq: list[set] = [set() for _ in range(U)]
    loc_checkins = np.zeros(L)
    loc_users: list[set] = [set() for _ in range(L)]
    loc_trajs = np.zeros(L)
    time_sum = np.zeros(L)
    for t in trajs:
        total[t.user_id] += len(t.locations)
        n_traj[t.user_id] += 1
        uniq[t.user_id].update(t.locations)
        for l, tm in zip(t.locations, t.times):
            loc_checkins[l] += 1
            loc_users[l].add(t.user_id)
            time_sum[l] += tm
        for l in set(t.locations):
            loc_trajs[l] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        avg_len = np.where(n_traj > 0, total / np.maximum(n_traj, 1), 0.0)
        mean_time = np.where(loc_checkins > 0, time_sum / np.maximum(loc_checkins, 1), 0.0)
    near = neighbours_within(ds.coords, radius_km)
    near_checkins = np.array([loc_checkins[n].sum() for n in near])

    seq_users: dict[tuple, set] = defaultdict(set)
    for t in trajs:
        seq_users[t.locations].add(t.user_id)
    poi_trajs: list[list[int]] = [[] for _ in range(L)]
    for i, t in enumerate(trajs):
        for l in set(t.locations):
            poi_trajs[l].append(i)
    sharing = np.zeros(len(trajs))
    near_any = np.zeros(len(trajs))
    intercept = np.zeros(len(trajs))
    mean_ct = np.zeros(len(trajs))
    for i, t in enumerate(trajs):
        sharing[i] = len(seq_users[t.locations])
        region = set()
        for l in set(t.locations):
            region.update(near[l])
        near_any[i] = loc_checkins[sorted(region)].sum()
        others = set()
        for l in set(t.locations):
            others.update(poi_trajs[l])
        intercept[i] = len(others) - 1
        mean_ct[i] = float(np.mean(t.times))

    return AggregateStats(
        user={"total_checkins": total, "unique_pois": np.array([len(s) for s in uniq], dtype=float),
              "n_trajectories": n_traj, "avg_traj_length": avg_len},
        location={"distinct_users": np.array([len(s) for s in loc_users], dtype=float),
                  "checkins_within_1km": near_checkins, "trajectories_with_poi": loc_trajs,
                  "mean_visit_time": mean_time},
        trajectory={"users_sharing": sharing, "checkins_within_1km": near_any,
                    "intercepting_trajectories": intercept, "mean_checkin_time": mean_ct},
        trajectories=trajs,
    )


# -- percentile binning ---------------------------------------------------


@dataclass
class VulnerabilityBins:
    edges: np.ndarray
    means: np.ndarray
    counts: np.ndarray
    assignment: np.ndarray

    def rows(self) -> list[str]:
        out = ["bin,lower,upper,count,mean_signal"]
        for b in range(len(self.means)):
            out.append(f"{b},{self.edges[b]!r},{self.edges[b + 1]!r},{int(self.counts[b])},{self.means[b]!r}")
        return out


def vulnerability_binning(stat, signal, n_bins: int = 10, log_signal: bool = False,
                          population=None) -> VulnerabilityBins:
    """Group targets by percentile of ``stat`` and average ``signal`` per group.

    With ``log_signal`` the signal holds logarithms (e.g. log Lambda) and each
    bin reports the log of the mean of ``exp(signal)``, which stays finite when
    the ratios themselves overflow.  Duplicate percentile edges are merged, so
    a constant statistic yields a single bin.  ``population`` (default: the
    targets' own statistics) supplies the values the percentile edges are
    taken over, e.g. one value per user when targets are grouped by user.
    """
    x = np.asarray(stat, dtype=np.float64)
    v = np.asarray(signal, dtype=np.float64)
    if x.shape != v.shape:
        raise EvaluationError("statistic and signal differ in length")
    pop = x if population is None else np.asarray(population, dtype=np.float64)
    if n_bins < 1 or n_bins > len(pop):
        raise EvaluationError(f"n_bins={n_bins} must lie in [1, {len(pop)}]")
    edges = np.unique(np.quantile(pop, np.linspace(0.0, 1.0, n_bins + 1)))
    if len(edges) == 1:
        edges = np.array([edges[0], edges[0]])
    assign = np.searchsorted(edges[1:-1], x, side="right")
    nb = len(edges) - 1
    counts = np.bincount(assign, minlength=nb)
    means = np.full(nb, np.nan)
    for b in range(nb):
        sel = v[assign == b]
        if sel.size:
            means[b] = logsumexp(sel) - np.log(sel.size) if log_signal else sel.mean()
    return VulnerabilityBins(edges, means, counts, assign)
