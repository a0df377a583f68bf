"""Independent oracles used by the tests.

Nothing here calls into the vectorized model code: the GRU is re-derived as an
explicit per-step loop over plain numpy vectors.
"""

import itertools
import math

import numpy as np

from poiaudit.model.network import LOG_FLOOR, time_code


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def reference_logits(model, user, locs, times):
    """Logits after the last check-in, one GRU step at a time."""
    p = model.params
    H = model.config.hidden_dim
    h = np.tanh(p["user_emb"][user] @ p["h0_W"] + p["h0_b"])
    for loc, t in zip(locs, times):
        x = np.concatenate([p["loc_emb"][loc], time_code(np.array(t), model.config.time_encoding)])
        ax = x @ p["gru_Wx"] + p["gru_b"]
        ah = h @ p["gru_Wh"]
        z = np.array([_sigmoid(v) for v in ax[:H] + ah[:H]])
        r = np.array([_sigmoid(v) for v in ax[H:2 * H] + ah[H:2 * H]])
        n = np.tanh(ax[2 * H:] + r * ah[2 * H:])
        h = (1.0 - z) * n + z * h
    return p["out_W"] @ h + p["out_b"]


def reference_log_probs(model, user, locs, times):
    z = reference_logits(model, user, locs, times)
    m = z.max()
    return z - (m + math.log(np.exp(z - m).sum()))


def exhaustive_ranking(model, user, start, length, t):
    """Every length-n continuation of ``start`` scored by floored PPL, sorted (PPL, sequence)."""
    L = model.n_locations
    scored = []
    for tail in itertools.product(range(L), repeat=length - 1):
        seq = (start,) + tail
        ppl = 0.0
        for i in range(1, length):
            lp = reference_log_probs(model, user, seq[:i], [t] * i)[seq[i]]
            ppl -= max(lp, LOG_FLOOR)
        scored.append((ppl, seq))
    scored.sort()
    return scored


def pairwise_auc(scores, labels):
    """Probability a random member outscores a random non-member (ties count one half)."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = 0.0
    for a in pos:
        for b in neg:
            wins += 1.0 if a > b else 0.5 if a == b else 0.0
    return wins / (len(pos) * len(neg))


def central_difference(f, x, h=1e-6):
    """Gradient of scalar ``f`` at ``x`` by central differences, one coordinate at a time."""
    g = np.zeros_like(x)
    for i in range(x.size):
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def preprocessing_violations(path, ds, min_occurrence, split_ratio=(0.8, 0.1, 0.1)):
    """Check a preprocessed dataset against its raw file; returns a list of violations (empty = conformant)."""
    import csv
    from collections import Counter, defaultdict
    from datetime import datetime

    def parse(ts):
        ts = ts[:-1] + "+00:00" if ts.endswith("Z") else ts
        return datetime.fromisoformat(ts).replace(tzinfo=None)

    raw = [(u, parse(ts), float(lat), float(lon), p) for u, ts, lat, lon, p in csv.reader(open(path))]
    bad = []
    users = Counter(ds.user_ids[t.user_id] for t in ds.trajectories for _ in t.locations)
    locs = Counter(ds.location_ids[l] for t in ds.trajectories for l in t.locations)
    if min(users.values()) < min_occurrence or min(locs.values()) < min_occurrence:
        bad.append("a surviving user or location occurs fewer than min_occurrence times")
    if any(len(t) < 2 for t in ds.trajectories):
        bad.append("trajectory shorter than 2")
    by_day = defaultdict(list)
    for u, dt, lat, lon, p in raw:
        by_day[(u, dt.date().isoformat())].append((dt, p, lat, lon))
    seen = set()
    for t in ds.trajectories:
        key = (ds.user_ids[t.user_id], t.day)
        if key in seen:
            bad.append(f"two trajectories for {key}")
        seen.add(key)
        kept = sorted((dt, p) for dt, p, _, _ in by_day[key] if p in locs and key[0] in users)
        if [ds.location_ids[l] for l in t.locations] != [p for _, p in kept]:
            bad.append(f"trajectory {key} is not the day's surviving check-ins in time order")
        want_t = [(dt.hour * 3600 + dt.minute * 60 + dt.second) / 86400.0 for dt, _ in kept]
        if list(t.times) != want_t or not all(0.0 <= x < 1.0 for x in t.times):
            bad.append(f"trajectory {key} has unnormalized times")
    for key, rows in by_day.items():
        if key not in seen and key[0] in users and sum(p in locs for _, p, _, _ in rows) >= 2:
            bad.append(f"day {key} with >= 2 surviving check-ins was dropped")
    for l, lid in enumerate(ds.location_ids):
        first = next((lat, lon) for _, _, lat, lon, p in raw if p == lid)
        if tuple(ds.coords[l]) != first:
            bad.append(f"coordinates of {lid} differ from the raw file")
    n = len(ds.trajectories)
    sizes = Counter(t.split for t in ds.trajectories)
    n_train = round(split_ratio[0] * n)
    n_valid = min(round(split_ratio[1] * n), n - n_train)
    if (sizes["TRAIN"], sizes["VALID"], sizes["TEST"]) != (n_train, n_valid, n - n_train - n_valid):
        bad.append(f"split sizes {dict(sizes)} do not follow the ratio")
    return bad
