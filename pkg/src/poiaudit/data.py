"""Check-in data model, loading, preprocessing, splitting and synthesis.

Raw check-in files carry one record per row in the order
``user, time, latitude, longitude, location``.  ``preprocess`` turns them
into daily trajectories over dense user / location indices with
timestamps normalized to ``[0, 1]`` (seconds since midnight / 86400).
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SECONDS_PER_DAY = 86400.0
TRAIN, VALID, TEST = "TRAIN", "VALID", "TEST"
SPLITS = (TRAIN, VALID, TEST)
DATASET_FORMAT = "poiaudit.dataset/1"


class DatasetError(ValueError):
    """Raised for malformed input files or datasets that end up empty."""


class ParseError(DatasetError):
    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


@dataclass(frozen=True)
class CheckIn:
    user_id: int
    location_id: int
    timestamp: float
    latitude: float
    longitude: float
    raw_time: datetime | None = None


@dataclass(frozen=True)
class Trajectory:
    """One user's check-ins within a single calendar day."""

    user_id: int
    locations: tuple[int, ...]
    times: tuple[float, ...]
    split: str = TRAIN
    day: str = ""

    def __post_init__(self):
        if len(self.locations) != len(self.times):
            raise DatasetError("locations and times differ in length")

    def __len__(self) -> int:
        return len(self.locations)

    def checkins(self, coords: np.ndarray | None = None) -> list[CheckIn]:
        out = []
        for loc, t in zip(self.locations, self.times):
            lat, lon = (float(coords[loc, 0]), float(coords[loc, 1])) if coords is not None else (0.0, 0.0)
            out.append(CheckIn(self.user_id, loc, t, lat, lon))
        return out

    def with_split(self, split: str) -> "Trajectory":
        return dataclasses.replace(self, split=split)


@dataclass(frozen=True)
class PreprocessConfig:
    min_occurrence: int = 10
    segment_hours: float = 24.0
    split_ratio: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if self.min_occurrence < 1:
            raise ValueError("min_occurrence must be >= 1")
        if len(self.split_ratio) != 3 or any(r <= 0 for r in self.split_ratio):
            raise ValueError("split_ratio needs three positive components")
        if abs(sum(self.split_ratio) - 1.0) > 1e-9:
            raise ValueError("split_ratio must sum to 1")
        if self.segment_hours != 24.0:
            # segmentation is by calendar day; other window sizes are not supported
            raise ValueError("only 24-hour (calendar day) segmentation is supported")


@dataclass
class MobilityDataset:
    n_users: int
    n_locations: int
    coords: np.ndarray  # (n_locations, 2) lat, lon in degrees
    trajectories: list[Trajectory]
    user_ids: list[str] = field(default_factory=list)
    location_ids: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        if self.coords.shape[0] != self.n_locations:
            raise DatasetError("location table size does not match n_locations")
        if not self.user_ids:
            self.user_ids = [str(i) for i in range(self.n_users)]
        if not self.location_ids:
            self.location_ids = [str(i) for i in range(self.n_locations)]

    def split(self, name: str) -> list[Trajectory]:
        return [t for t in self.trajectories if t.split == name]

    @property
    def n_checkins(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def with_trajectories(self, trajectories: Iterable[Trajectory], **config) -> "MobilityDataset":
        cfg = dict(self.config)
        cfg.update(config)
        return MobilityDataset(self.n_users, self.n_locations, self.coords.copy(),
                               list(trajectories), list(self.user_ids),
                               list(self.location_ids), cfg)

    def user_location_counts(self, splits: Sequence[str] = (TRAIN,)) -> list[Counter]:
        counts = [Counter() for _ in range(self.n_users)]
        for t in self.trajectories:
            if t.split in splits:
                counts[t.user_id].update(t.locations)
        return counts

    def most_common_locations(self, splits: Sequence[str] = (TRAIN,)) -> dict[int, int]:
        """User -> most visited location among ``splits`` (ties -> lower id)."""
        out = {}
        for u, c in enumerate(self.user_location_counts(splits)):
            if c:
                out[u] = min(c, key=lambda loc: (-c[loc], loc))
        return out

    # -- serialization -------------------------------------------------

    def to_json(self) -> str:
        doc = {
            "format": DATASET_FORMAT,
            "config": self.config,
            "n_users": self.n_users,
            "n_locations": self.n_locations,
            "user_ids": self.user_ids,
            "location_ids": self.location_ids,
            "coords": self.coords.tolist(),
            "trajectories": [
                {"u": t.user_id, "l": list(t.locations), "t": list(t.times),
                 "split": t.split, "day": t.day}
                for t in self.trajectories
            ],
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "MobilityDataset":
        doc = json.loads(text)
        if doc.get("format") != DATASET_FORMAT:
            raise DatasetError(f"unknown dataset format {doc.get('format')!r}")
        trajs = [Trajectory(d["u"], tuple(d["l"]), tuple(d["t"]), d["split"], d.get("day", ""))
                 for d in doc["trajectories"]]
        return cls(doc["n_users"], doc["n_locations"], np.array(doc["coords"], dtype=np.float64),
                   trajs, doc["user_ids"], doc["location_ids"], doc["config"])

    def save(self, path) -> str:
        """Write the dataset file; returns its sha256."""
        text = self.to_json()
        Path(path).write_text(text)
        return hashlib.sha256(text.encode()).hexdigest()

    @classmethod
    def load(cls, path) -> "MobilityDataset":
        return cls.from_json(Path(path).read_text())

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


@dataclass(frozen=True)
class RecordFormat:
    """Layout of a raw check-in file.

    ``time_format`` is a ``strptime`` pattern; ``None`` accepts ISO-8601
    datetimes or numeric POSIX seconds.
    """

    delimiter: str = ","
    time_format: str | None = None
    header: bool = False


@dataclass
class RawCheckIns:
    """Check-ins from ``load_checkins`` with the dense-id mapping tables."""

    checkins: list[CheckIn]
    user_ids: list[str]
    location_ids: list[str]

    def __len__(self):
        return len(self.checkins)

    def __iter__(self):
        return iter(self.checkins)

    def __getitem__(self, i):
        return self.checkins[i]


def _parse_time(text: str, fmt: str | None) -> datetime:
    text = text.strip()
    if fmt is not None:
        dt = datetime.strptime(text, fmt)
    else:
        try:
            # a trailing "Z" (UTC designator) is not accepted by fromisoformat before 3.11
            dt = datetime.fromisoformat(text[:-1] + "+00:00" if text.endswith("Z") else text)
        except ValueError:
            secs = float(text)
            dt = datetime(1970, 1, 1) + timedelta(seconds=secs)
    # keep wall-clock time as given; the day boundary is the record's own local day
    return dt.replace(tzinfo=None)


def normalize_time(dt: datetime) -> float:
    secs = dt.hour * 3600 + dt.minute * 60 + dt.second + dt.microsecond / 1e6
    return secs / SECONDS_PER_DAY


def denormalize_time(t: float) -> float:
    """Normalized time -> seconds since midnight."""
    return t * SECONDS_PER_DAY


def load_checkins(path, fmt: RecordFormat | None = None) -> RawCheckIns:
    fmt = fmt or RecordFormat()
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"no such file: {path}")
    user_index: dict[str, int] = {}
    loc_index: dict[str, int] = {}
    out = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh, delimiter=fmt.delimiter)
        for rownum, row in enumerate(reader, start=1):
            if fmt.header and rownum == 1:
                continue
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 5:
                raise ParseError(rownum, f"expected 5 fields, got {len(row)}")
            user, ts, lat, lon, poi = (f.strip() for f in row)
            try:
                dt = _parse_time(ts, fmt.time_format)
                lat_f, lon_f = float(lat), float(lon)
            except ValueError as exc:
                raise ParseError(rownum, str(exc)) from None
            if not (-90 <= lat_f <= 90 and -180 <= lon_f <= 180):
                raise ParseError(rownum, f"coordinates out of range ({lat_f}, {lon_f})")
            u = user_index.setdefault(user, len(user_index))
            loc = loc_index.setdefault(poi, len(loc_index))
            out.append(CheckIn(u, loc, normalize_time(dt), lat_f, lon_f, dt))
    if not out:
        raise DatasetError(f"{path}: empty dataset")
    return RawCheckIns(out, list(user_index), list(loc_index))


def write_checkins(path, rows: Iterable[tuple], delimiter: str = ",") -> None:
    """Write raw records ``(user, datetime, lat, lon, poi)`` in the 5-field layout."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        for user, dt, lat, lon, poi in rows:
            w.writerow([user, dt.isoformat(), repr(float(lat)), repr(float(lon)), poi])


def _segment(checkins: list[CheckIn]) -> list[list[CheckIn]]:
    by_user: dict[int, list[tuple[int, CheckIn]]] = defaultdict(list)
    for i, c in enumerate(checkins):
        by_user[c.user_id].append((i, c))
    segments = []
    for u in sorted(by_user):
        rows = sorted(by_user[u], key=lambda ic: (ic[1].raw_time, ic[0]))
        current: list[CheckIn] = []
        for _, c in rows:
            if current and current[-1].raw_time.date() != c.raw_time.date():
                segments.append(current)
                current = []
            current.append(c)
        if current:
            segments.append(current)
    return segments


def _filter_fixed_point(checkins: list[CheckIn], min_occ: int) -> list[list[CheckIn]]:
    """Alternate frequency filtering and singleton-trajectory removal until stable."""
    current = list(checkins)
    while True:
        while True:
            users = Counter(c.user_id for c in current)
            locs = Counter(c.location_id for c in current)
            kept = [c for c in current if users[c.user_id] >= min_occ and locs[c.location_id] >= min_occ]
            if len(kept) == len(current):
                break
            current = kept
        segments = [s for s in _segment(current) if len(s) >= 2]
        survivors = [c for s in segments for c in s]
        if len(survivors) == len(current):
            return segments
        current = survivors


def split_trajectories(trajs: list[Trajectory], ratio, seed: int) -> list[Trajectory]:
    n = len(trajs)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratio[0] * n))
    n_valid = int(round(ratio[1] * n))
    n_valid = min(n_valid, n - n_train)
    tags = [TEST] * n
    for rank, idx in enumerate(order):
        if rank < n_train:
            tags[idx] = TRAIN
        elif rank < n_train + n_valid:
            tags[idx] = VALID
    return [t.with_split(tag) for t, tag in zip(trajs, tags)]


def preprocess(checkins, cfg: PreprocessConfig | None = None) -> MobilityDataset:
    cfg = cfg or PreprocessConfig()
    if isinstance(checkins, RawCheckIns):
        raw_users, raw_locs, rows = checkins.user_ids, checkins.location_ids, checkins.checkins
    else:
        rows = list(checkins)
        raw_users = raw_locs = None
    if not rows:
        raise DatasetError("empty dataset")
    if any(c.raw_time is None for c in rows):
        raise DatasetError("preprocess needs raw check-in times")
    segments = _filter_fixed_point(rows, cfg.min_occurrence)
    if not segments:
        raise DatasetError("all check-ins were filtered out")

    users = sorted({c.user_id for s in segments for c in s})
    locs = sorted({c.location_id for s in segments for c in s})
    umap = {u: i for i, u in enumerate(users)}
    lmap = {l: i for i, l in enumerate(locs)}
    coords = np.zeros((len(locs), 2))
    seen = set()
    for c in rows:
        if c.location_id in lmap and c.location_id not in seen:
            seen.add(c.location_id)
            coords[lmap[c.location_id]] = (c.latitude, c.longitude)

    trajs = [
        Trajectory(umap[s[0].user_id], tuple(lmap[c.location_id] for c in s),
                   tuple(normalize_time(c.raw_time) for c in s), TRAIN,
                   s[0].raw_time.date().isoformat())
        for s in segments
    ]
    trajs = split_trajectories(trajs, cfg.split_ratio, cfg.seed)
    user_ids = [raw_users[u] if raw_users else str(u) for u in users]
    loc_ids = [raw_locs[l] if raw_locs else str(l) for l in locs]
    return MobilityDataset(len(users), len(locs), coords, trajs, user_ids, loc_ids,
                           {"preprocess": dataclasses.asdict(cfg)})


@dataclass(frozen=True)
class DatasetStats:
    n_pois: int
    n_checkins: int
    n_users: int
    n_trajectories: int
    avg_length: float

    def as_row(self) -> tuple:
        return (self.n_pois, self.n_checkins, self.n_users, self.n_trajectories, round(self.avg_length, 2))


def dataset_stats(ds: MobilityDataset) -> DatasetStats:
    if not ds.trajectories:
        raise DatasetError("empty dataset")
    pois = {l for t in ds.trajectories for l in t.locations}
    users = {t.user_id for t in ds.trajectories}
    n = ds.n_checkins
    return DatasetStats(len(pois), n, len(users), len(ds.trajectories), n / len(ds.trajectories))


# -- synthetic data ------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 200
    n_locations: int = 500
    n_days: int = 60
    seed: int = 0
    zipf_exponent: float = 1.2
    time_beta: tuple[float, float] = (3.0, 3.0)
    mean_extra_length: float = 1.6  # trajectory length = 2 + Geometric extra
    max_length: int = 12
    activity: tuple[float, float] = (1.5, 4.0)  # Beta shape of per-user daily activity
    center: tuple[float, float] = (40.73, -73.99)
    extent_deg: float = 0.05
    split_ratio: tuple[float, float, float] = (0.8, 0.1, 0.1)


@dataclass
class GroundTruth:
    most_common: list[int]
    membership: list[bool]  # per trajectory, True when in TRAIN


def _zipf_weights(n: int, s: float) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=np.float64) ** -s
    return w / w.sum()


def synth_generate(n_users: int = 200, n_locations: int = 500, n_days: int = 60,
                   seed: int = 0, **overrides) -> tuple[MobilityDataset, GroundTruth]:
    """Generate a synthetic check-in dataset with known per-user favourite POIs.

    Each user ranks all POIs by a private random permutation and visits them
    with Zipf weights; the rank-1 POI is the designated most-common location.
    If sampling leaves another POI tied or ahead, visits of the leader are
    reassigned to the designated POI until it is the strict mode.
    """
    cfg = SynthConfig(n_users, n_locations, n_days, seed, **overrides)
    if n_users < 2 or n_locations < 2:
        raise ValueError("need at least 2 users and 2 locations")
    if n_days < 1:
        raise ValueError("n_days must be >= 1")
    rng = np.random.default_rng(seed)
    half = cfg.extent_deg / 2
    coords = np.column_stack([
        cfg.center[0] + rng.uniform(-half, half, n_locations),
        cfg.center[1] + rng.uniform(-half, half, n_locations),
    ])
    weights = _zipf_weights(n_locations, cfg.zipf_exponent)
    p_geom = 1.0 / (1.0 + cfg.mean_extra_length)
    day0 = datetime(2012, 4, 12)

    per_user: list[list[tuple[int, list[int], list[float]]]] = []
    favourite = []
    for u in range(n_users):
        prefs = rng.permutation(n_locations)
        favourite.append(int(prefs[0]))
        rate = rng.beta(*cfg.activity)
        days = np.flatnonzero(rng.random(n_days) < rate)
        if days.size == 0:
            days = np.array([rng.integers(n_days)])
        trajs = []
        for d in days:
            length = min(2 + rng.geometric(p_geom) - 1, cfg.max_length)
            locs = prefs[rng.choice(n_locations, size=length, p=weights)]
            secs = np.sort(np.floor(rng.beta(*cfg.time_beta, size=length) * SECONDS_PER_DAY))
            trajs.append((int(d), [int(x) for x in locs], [float(s) for s in secs]))
        per_user.append(trajs)

    for u, trajs in enumerate(per_user):
        fav = favourite[u]
        while True:
            counts = Counter(l for _, locs, _ in trajs for l in locs)
            rival = min((l for l in counts if l != fav), key=lambda l: (-counts[l], l), default=None)
            if rival is None or counts[fav] > counts[rival]:
                break
            for _, locs, _ in trajs:
                if rival in locs:
                    locs[locs.index(rival)] = fav
                    break

    trajectories = []
    for u, trajs in enumerate(per_user):
        for d, locs, secs in trajs:
            day = (day0 + timedelta(days=d)).date().isoformat()
            trajectories.append(Trajectory(u, tuple(locs), tuple(s / SECONDS_PER_DAY for s in secs), TRAIN, day))
    trajectories = split_trajectories(trajectories, cfg.split_ratio, seed)
    conf = dataclasses.asdict(cfg)
    ds = MobilityDataset(n_users, n_locations, coords, trajectories, config={"synth": conf})
    truth = GroundTruth(favourite, [t.split == TRAIN for t in trajectories])
    return ds, truth


def synth_raw_records(ds: MobilityDataset) -> list[tuple]:
    """Render a dataset back to raw 5-field records (used for pipeline fixtures)."""
    rows = []
    for t in ds.trajectories:
        day = datetime.fromisoformat(t.day) if t.day else datetime(2012, 4, 12)
        for loc, tt in zip(t.locations, t.times):
            dt = day + timedelta(seconds=int(round(denormalize_time(tt))))
            rows.append((f"user{t.user_id}", dt, ds.coords[loc, 0], ds.coords[loc, 1], f"poi{loc}"))
    return rows


def haversine_km(lat1, lon1, lat2, lon2, radius_km: float = 6371.0088):
    lat1, lon1, lat2, lon2 = map(np.radians, (lat1, lon1, lat2, lon2))
    a = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    return 2 * radius_km * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def unit_vectors(coords: np.ndarray) -> np.ndarray:
    """lat/lon degrees -> points on the unit sphere (for chord-distance KD-trees)."""
    lat = np.radians(coords[:, 0])
    lon = np.radians(coords[:, 1])
    return np.column_stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)])


def chord_for_km(km: float, radius_km: float = 6371.0088) -> float:
    return 2.0 * math.sin(km / (2.0 * radius_km))
