"""Data-extraction attacks against a black-box next-POI model.

Both attacks only need ``model.query(users, locs, times, lengths)``, which
returns one logit row over all locations per queried prefix.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .model.network import LOG_FLOOR


class QueryModel(Protocol):
    n_users: int
    n_locations: int

    def query(self, users, locs, times, lengths=None) -> np.ndarray: ...


class CountingModel:
    """Wraps a model and counts queried prefixes (one per batch row)."""

    def __init__(self, model: QueryModel):
        self.model = model
        self.n_users = model.n_users
        self.n_locations = model.n_locations
        self.queries = 0

    def query(self, users, locs, times, lengths=None):
        out = self.model.query(users, locs, times, lengths)
        self.queries += out.shape[0]
        return out


@dataclass(frozen=True)
class LocExtractConfig:
    query_budget: int = 50
    query_timestamp: float = 0.5
    top_k: int = 1
    voting: str = "soft"  # "soft" | "hard"
    aggregate: str = "logits"  # soft voting domain: "logits" | "probs"
    seed: int = 0

    def __post_init__(self):
        if self.query_budget < 1:
            raise ValueError("query_budget must be >= 1")
        if not 0.0 <= self.query_timestamp <= 1.0:
            raise ValueError("query_timestamp must lie in [0, 1]")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.voting not in ("soft", "hard"):
            raise ValueError(f"unknown voting scheme {self.voting!r}")
        if self.aggregate not in ("logits", "probs"):
            raise ValueError(f"unknown aggregate {self.aggregate!r}")


@dataclass(frozen=True)
class TrajExtractConfig:
    beam_width: int = 50
    target_length: int = 4
    query_timestamp: float = 0.5
    top_beta_out: int | None = None  # defaults to beam_width
    seed: int = 0

    def __post_init__(self):
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        if self.target_length < 2:
            raise ValueError("target_length must be >= 2")
        if not 0.0 <= self.query_timestamp <= 1.0:
            raise ValueError("query_timestamp must lie in [0, 1]")
        if self.top_beta_out is not None and not 1 <= self.top_beta_out <= self.beam_width:
            raise ValueError("top_beta_out must lie in [1, beam_width]")

    @property
    def n_out(self) -> int:
        return self.beam_width if self.top_beta_out is None else self.top_beta_out


def user_rng(seed: int, user: int) -> np.random.Generator:
    """Per-user stream so results do not depend on attack order."""
    return np.random.default_rng([seed, user])


def draw_query_locations(n_locations: int, q: int, rng: np.random.Generator) -> np.ndarray:
    # without replacement while the location space allows it
    if q <= n_locations:
        return rng.choice(n_locations, size=q, replace=False)
    return rng.integers(0, n_locations, size=q)


def top_k_ids(scores: np.ndarray, k: int) -> list[int]:
    """Indices of the k largest scores, ties to the lower index."""
    order = np.lexsort((np.arange(len(scores)), -scores))
    return [int(i) for i in order[:k]]


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def loc_extract(model: QueryModel, user: int, cfg: LocExtractConfig | None = None,
                query_locations: Sequence[int] | None = None) -> list[int]:
    """Guess ``user``'s most visited location from single-check-in queries.

    ``query_locations`` overrides the seeded random draw (mainly for tests).
    """
    cfg = cfg or LocExtractConfig()
    if not 0 <= user < model.n_users:
        raise IndexError(f"user {user} out of range")
    if query_locations is None:
        query_locations = draw_query_locations(model.n_locations, cfg.query_budget, user_rng(cfg.seed, user))
    locs = np.asarray(query_locations, dtype=np.int64)[:, None]
    q = len(locs)
    logits = model.query(np.full(q, user), locs, np.full((q, 1), cfg.query_timestamp))
    k = min(cfg.top_k, model.n_locations)
    if cfg.voting == "soft":
        scores = logits if cfg.aggregate == "logits" else np.exp(_log_softmax(logits))
        return top_k_ids(scores.mean(axis=0), k)
    winners = [top_k_ids(row, 1)[0] for row in logits]
    votes = np.bincount(winners, minlength=model.n_locations).astype(np.float64)
    return top_k_ids(votes, k)


@dataclass
class Beam:
    """Candidate prefixes sorted ascending by cumulative log perplexity."""

    sequences: np.ndarray  # (size, length) location ids
    ppl: np.ndarray  # (size,)
    width: int = field(default=50)

    def __post_init__(self):
        if len(self.sequences) > self.width:
            raise ValueError("beam holds more entries than its width")
        if not np.all(np.isfinite(self.ppl)):
            raise ValueError("beam scores must be finite")

    def __len__(self):
        return len(self.ppl)

    def entries(self) -> list[tuple[tuple[int, ...], float]]:
        return [(tuple(int(x) for x in s), float(p)) for s, p in zip(self.sequences, self.ppl)]


def rank_candidates(seqs: np.ndarray, ppl: np.ndarray) -> np.ndarray:
    """Order by PPL, ties broken lexicographically by the location sequence."""
    keys = [seqs[:, j] for j in range(seqs.shape[1] - 1, -1, -1)] + [ppl]
    return np.lexsort(keys)


def expand_beam(model: QueryModel, user: int, beam: Beam, t: float) -> Beam:
    """One beam step: one query per entry scores all |L| children."""
    size, length = beam.sequences.shape
    logits = model.query(np.full(size, user), beam.sequences, np.full((size, length), t))
    nll = -np.maximum(_log_softmax(logits), LOG_FLOOR)  # (size, L)
    L = nll.shape[1]
    ppl = (beam.ppl[:, None] + nll).ravel()
    seqs = np.concatenate([np.repeat(beam.sequences, L, axis=0), np.tile(np.arange(L), size)[:, None]], axis=1)
    keep = rank_candidates(seqs, ppl)[:beam.width]
    return Beam(seqs[keep], ppl[keep], beam.width)


def traj_extract(model: QueryModel, user: int, start_location: int,
                 cfg: TrajExtractConfig | None = None) -> list[tuple[tuple[int, ...], float]]:
    """Beam search for the lowest-PPL length-n sequences starting at ``start_location``.

    Returns ``(locations, ppl)`` pairs ascending by PPL.
    """
    cfg = cfg or TrajExtractConfig()
    if not 0 <= start_location < model.n_locations:
        raise IndexError(f"start location {start_location} out of range")
    if not 0 <= user < model.n_users:
        raise IndexError(f"user {user} out of range")
    beam = Beam(np.array([[start_location]], dtype=np.int64), np.zeros(1), cfg.beam_width)
    for _ in range(cfg.target_length - 1):
        beam = expand_beam(model, user, beam, cfg.query_timestamp)
    return beam.entries()[:cfg.n_out]

