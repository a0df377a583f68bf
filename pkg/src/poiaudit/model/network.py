"""Gated recurrent next-POI recommender with analytic gradients.

The model maps ``(user, [(l_0, t_0), ..., (l_{n-1}, t_{n-1})])`` to logits over
all locations.  The user embedding enters through the initial hidden state
``h0 = tanh(E_user[u] @ W_h0 + b_h0)``; each check-in feeds
``[E_loc[l]; time_code(t)]`` into a GRU cell, and the hidden state after
check-in ``i`` is projected to the logits for the location at ``i + 1``.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from . import _backend

PROB_FLOOR = 1e-12
LOG_FLOOR = float(np.log(PROB_FLOOR))
CHECKPOINT_FORMAT = "poiaudit.checkpoint/1"


@dataclass(frozen=True)
class ModelConfig:
    user_embed_dim: int = 32
    loc_embed_dim: int = 32
    hidden_dim: int = 64
    time_encoding: str = "scalar"  # "scalar" or "sinusoidal-<k>"
    seed: int = 0
    zero_output_init: bool = False

    def __post_init__(self):
        if min(self.user_embed_dim, self.loc_embed_dim, self.hidden_dim) < 1:
            raise ValueError("all model dimensions must be >= 1")
        time_code_dim(self.time_encoding)


def time_code_dim(encoding: str) -> int:
    if encoding == "scalar":
        return 1
    if encoding.startswith("sinusoidal-"):
        k = int(encoding.split("-", 1)[1])
        if k < 1:
            raise ValueError("sinusoidal encoding needs k >= 1")
        return 2 * k
    raise ValueError(f"unknown time encoding {encoding!r}")


def time_code(times: np.ndarray, encoding: str) -> np.ndarray:
    times = np.asarray(times, dtype=np.float64)
    if encoding == "scalar":
        return times[..., None]
    k = time_code_dim(encoding) // 2
    freq = 2.0 * np.pi * np.arange(1, k + 1)
    ang = times[..., None] * freq
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


@dataclass
class QueryOutput:
    logits: np.ndarray
    probabilities: np.ndarray
    prefix_outputs: list["QueryOutput"] | None = None


@dataclass
class SequenceBatch:
    """Padded batch of check-in sequences.

    ``targets[b, i]`` is the location to predict after check-in ``i`` of row
    ``b``, or ``-1`` when that position carries no loss.
    """

    users: np.ndarray
    locs: np.ndarray
    times: np.ndarray
    lengths: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return len(self.users)

    @classmethod
    def from_examples(cls, examples: Sequence[tuple]) -> "SequenceBatch":
        """Rows ``(user, locs, times, target)``: one loss at the end of each prefix."""
        if not examples:
            raise ValueError("empty batch")
        T = max(len(e[1]) for e in examples)
        B = len(examples)
        users = np.array([e[0] for e in examples], dtype=np.int64)
        locs = np.zeros((B, T), dtype=np.int64)
        times = np.zeros((B, T))
        lengths = np.empty(B, dtype=np.int64)
        targets = np.full((B, T), -1, dtype=np.int64)
        for b, (_, ls, ts, y) in enumerate(examples):
            n = len(ls)
            if n < 1:
                raise ValueError("prefix must hold at least one check-in")
            locs[b, :n] = ls
            times[b, :n] = ts
            lengths[b] = n
            targets[b, n - 1] = y
        return cls(users, locs, times, lengths, targets)

    @classmethod
    def from_trajectories(cls, trajs: Sequence, ignore_target: int | None = None) -> "SequenceBatch":
        """Teacher forcing: every prefix of every trajectory is one example.

        Positions whose target equals ``ignore_target`` (the MASK id) carry no loss.
        """
        if not trajs:
            raise ValueError("empty batch")
        T = max(len(t.locations) for t in trajs)
        B = len(trajs)
        users = np.array([t.user_id for t in trajs], dtype=np.int64)
        locs = np.zeros((B, T), dtype=np.int64)
        times = np.zeros((B, T))
        lengths = np.empty(B, dtype=np.int64)
        targets = np.full((B, T), -1, dtype=np.int64)
        for b, t in enumerate(trajs):
            n = len(t.locations)
            locs[b, :n] = t.locations
            times[b, :n] = t.times
            lengths[b] = n
            targets[b, : n - 1] = t.locations[1:]
        if ignore_target is not None:
            targets[targets == ignore_target] = -1
        return cls(users, locs, times, lengths, targets)


class PoiModel:
    """Next-POI model; parameters are views into one flat float64 buffer."""

    PARAM_NAMES = ("user_emb", "loc_emb", "h0_W", "h0_b", "gru_Wx", "gru_Wh", "gru_b", "out_W", "out_b")

    def __init__(self, n_users: int, n_locations: int, config: ModelConfig | None = None,
                 mask_token: bool = False, init: bool = True):
        self.config = config or ModelConfig()
        self.n_users = int(n_users)
        self.n_locations = int(n_locations)
        self.mask_token = bool(mask_token)
        self.mask_id = self.n_locations if mask_token else None
        c = self.config
        d_in = c.loc_embed_dim + time_code_dim(c.time_encoding)
        H = c.hidden_dim
        self.shapes = {
            "user_emb": (self.n_users, c.user_embed_dim),
            "loc_emb": (self.n_locations + int(mask_token), c.loc_embed_dim),
            "h0_W": (c.user_embed_dim, H),
            "h0_b": (H,),
            "gru_Wx": (d_in, 3 * H),
            "gru_Wh": (H, 3 * H),
            "gru_b": (3 * H,),
            "out_W": (self.n_locations, H),
            "out_b": (self.n_locations,),
        }
        self.offsets = {}
        off = 0
        for name in self.PARAM_NAMES:
            size = int(np.prod(self.shapes[name]))
            self.offsets[name] = (off, off + size)
            off += size
        self.n_params = off
        self.flat = np.zeros(off)
        self.params = self.views(self.flat)
        self.epoch = 0
        self.rng = np.random.default_rng(c.seed)
        if init:
            self._initialize()

    # -- parameter plumbing ---------------------------------------------

    def views(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        """Named views into a flat vector (or the trailing axis of a (B, P) array)."""
        lead = flat.shape[:-1]
        return {n: flat[..., a:b].reshape(lead + self.shapes[n]) for n, (a, b) in self.offsets.items()}

    def _initialize(self):
        rng = self.rng
        c = self.config
        p = self.params
        L = self.n_locations
        p["user_emb"][...] = rng.normal(0.0, 0.3, p["user_emb"].shape)
        p["loc_emb"][:L] = rng.normal(0.0, 0.3, (L, c.loc_embed_dim))
        k = 1.0 / np.sqrt(c.user_embed_dim)
        p["h0_W"][...] = rng.uniform(-k, k, p["h0_W"].shape)
        k = 1.0 / np.sqrt(c.hidden_dim)
        for name in ("gru_Wx", "gru_Wh", "gru_b"):
            p[name][...] = rng.uniform(-k, k, p[name].shape)
        if not c.zero_output_init:
            p["out_W"][...] = rng.uniform(-k, k, p["out_W"].shape)
        if self.mask_token:
            # drawn last so the other parameters match an unmasked model with the same seed
            p["loc_emb"][L:] = rng.normal(0.0, 0.3, (1, c.loc_embed_dim))

    def copy(self) -> "PoiModel":
        m = PoiModel(self.n_users, self.n_locations, self.config, self.mask_token, init=False)
        m.flat[...] = self.flat
        m.epoch = self.epoch
        m.rng.bit_generator.state = self.rng.bit_generator.state
        return m

    def load_flat(self, flat: np.ndarray) -> None:
        self.flat[...] = flat

    # -- forward ----------------------------------------------------------

    def _check_indices(self, users, locs, lengths):
        if users.size and (users.min() < 0 or users.max() >= self.n_users):
            raise IndexError(f"user index out of range [0, {self.n_users})")
        valid = np.arange(locs.shape[1])[None, :] < lengths[:, None]
        if valid.any():
            used = locs[valid]
            hi = self.n_locations + int(self.mask_token)
            if used.min() < 0 or used.max() >= hi:
                raise IndexError(f"location index out of range [0, {hi})")

    def _encode(self, locs, times):
        p = self.params
        return np.concatenate([p["loc_emb"][locs], time_code(times, self.config.time_encoding)], axis=-1)

    def _run(self, users, locs, times, lengths):
        p = self.params
        X = self._encode(locs, times).transpose(1, 0, 2)  # (T, B, D)
        A = X @ p["gru_Wx"] + p["gru_b"]
        h0 = np.tanh(p["user_emb"][users] @ p["h0_W"] + p["h0_b"])
        mask = (np.arange(locs.shape[1])[:, None] < lengths[None, :]).astype(np.float64)
        Hs, Z, R, N, Cn = _backend.gru_forward(A, h0, p["gru_Wh"], mask)
        return X, h0, mask, Hs, Z, R, N, Cn

    @staticmethod
    def _as_arrays(users, locs, times, lengths=None):
        users = np.atleast_1d(np.asarray(users, dtype=np.int64))
        if isinstance(locs, np.ndarray) and locs.ndim == 2:
            locs_a = locs.astype(np.int64, copy=False)
            times_a = np.asarray(times, dtype=np.float64)
            if lengths is None:
                lengths = np.full(len(users), locs_a.shape[1], dtype=np.int64)
        else:
            seqs = [list(s) for s in locs]
            tseq = [list(s) for s in times]
            T = max(len(s) for s in seqs)
            locs_a = np.zeros((len(seqs), T), dtype=np.int64)
            times_a = np.zeros((len(seqs), T))
            lengths = np.array([len(s) for s in seqs], dtype=np.int64)
            for b, (s, ts) in enumerate(zip(seqs, tseq)):
                locs_a[b, : len(s)] = s
                times_a[b, : len(s)] = ts
        lengths = np.asarray(lengths, dtype=np.int64)
        if lengths.size and lengths.min() < 1:
            raise ValueError("every prefix needs at least one check-in")
        return users, locs_a, times_a, lengths

    def prefix_logits(self, users, locs, times, lengths=None) -> np.ndarray:
        """Logits after every check-in: (B, T, |L|)."""
        users, locs, times, lengths = self._as_arrays(users, locs, times, lengths)
        self._check_indices(users, locs, lengths)
        Hs = self._run(users, locs, times, lengths)[3]
        p = self.params
        return (Hs[1:] @ p["out_W"].T + p["out_b"]).transpose(1, 0, 2)

    def query(self, users, locs, times, lengths=None) -> np.ndarray:
        """Black-box query: logits after the last check-in of each prefix, (B, |L|)."""
        users, locs, times, lengths = self._as_arrays(users, locs, times, lengths)
        self._check_indices(users, locs, lengths)
        Hs = self._run(users, locs, times, lengths)[3]
        p = self.params
        return Hs[-1] @ p["out_W"].T + p["out_b"]

    def forward(self, user: int, locs: Sequence[int], times: Sequence[float]) -> QueryOutput:
        if len(locs) < 1 or len(locs) != len(times):
            raise ValueError("prefix needs >= 1 check-in with matching timestamps")
        logits = self.prefix_logits([user], [list(locs)], [list(times)])[0]
        probs = softmax(logits)
        prefixes = [QueryOutput(logits[i], probs[i]) for i in range(len(locs))]
        return QueryOutput(logits[-1], probs[-1], prefixes)

    def loss(self, user: int, locs, times, target: int) -> float:
        if not 0 <= target < self.n_locations:
            raise IndexError("target out of range")
        logits = self.forward(user, locs, times).logits
        lp = logits[target] - logsumexp(logits)
        return float(-max(lp, LOG_FLOOR))

    def step_log_probs(self, user: int, locs, times) -> np.ndarray:
        """log p(l_i | u, x^{0:i-1}) for i = 1..n-1, floored at log(1e-12)."""
        if len(locs) < 2:
            raise ValueError("need a trajectory of length >= 2")
        logits = self.prefix_logits([user], [list(locs)], [list(times)])[0][:-1]
        lp = logits[np.arange(len(locs) - 1), np.asarray(locs[1:])] - logsumexp(logits, axis=1)
        return np.maximum(lp, LOG_FLOOR)

    def log_perplexity(self, user: int, locs, times) -> float:
        return float(-self.step_log_probs(user, locs, times).sum())

    # -- gradients --------------------------------------------------------

    def loss_and_grad(self, batch: SequenceBatch, per_example: bool = False):
        """Mean loss over all target positions and its gradient.

        With ``per_example`` the gradient is (B, P): row ``b`` is the gradient of
        row ``b``'s own mean loss.  The batch gradient is the position-weighted
        average of those rows (the plain mean when each row has one target).
        """
        users, locs, times, lengths = batch.users, batch.locs, batch.times, batch.lengths
        self._check_indices(users, locs, lengths)
        p = self.params
        X, h0, mask, Hs, Z, R, N, Cn = self._run(users, locs, times, lengths)
        T, B, H = Hs.shape[0] - 1, len(users), self.config.hidden_dim
        bi, ti = np.nonzero(batch.targets >= 0)
        if bi.size == 0:
            raise ValueError("batch has no target positions")
        y = batch.targets[bi, ti]
        if y.min() < 0 or y.max() >= self.n_locations:
            raise IndexError("target out of range")
        Hp = Hs[ti + 1, bi]
        logits = Hp @ p["out_W"].T
        logits += p["out_b"]
        rows = np.arange(len(y))
        peak = logits.max(axis=1)
        logits -= peak[:, None]
        lp = logits[rows, y]
        dlogits = np.exp(logits, out=logits)  # shifted logits are not needed again
        norm = dlogits.sum(axis=1)
        lp -= np.log(norm)
        active = lp > LOG_FLOOR
        total = len(y)
        loss = float(-np.maximum(lp, LOG_FLOOR).sum() / total)

        if per_example:
            counts = np.bincount(bi, minlength=B).astype(np.float64)
            w = (1.0 / counts[bi]) * active
        else:
            w = active / total
        dlogits *= (w / norm)[:, None]
        dlogits[rows, y] -= w

        dHs = np.zeros((T, B, H))
        dHs[ti, bi] = dlogits @ p["out_W"]
        dA, dC, dh0 = _backend.gru_backward(dHs, Hs, Z, R, N, Cn, p["gru_Wh"], mask)
        dh0pre = dh0 * (1.0 - h0 * h0)
        dX = dA @ p["gru_Wx"].T  # (T, B, D)
        dl = self.config.loc_embed_dim
        locs_t = locs.T

        if not per_example:
            grad = np.zeros(self.n_params)
            g = self.views(grad)
            np.matmul(dlogits.T, Hp, out=g["out_W"])
            g["out_b"][...] = dlogits.sum(axis=0)
            G = dA.shape[2]
            np.matmul(X.reshape(-1, X.shape[2]).T, dA.reshape(-1, G), out=g["gru_Wx"])
            np.matmul(Hs[:-1].reshape(-1, H).T, dC.reshape(-1, G), out=g["gru_Wh"])
            g["gru_b"][...] = dA.sum(axis=(0, 1))
            np.add.at(g["loc_emb"], locs_t, dX[..., :dl])
            g["h0_W"][...] = p["user_emb"][users].T @ dh0pre
            g["h0_b"][...] = dh0pre.sum(axis=0)
            np.add.at(g["user_emb"], users, dh0pre @ p["h0_W"].T)
            return loss, grad

        grad = np.zeros((B, self.n_params))
        g = self.views(grad)
        np.add.at(g["out_W"], bi, dlogits[:, :, None] * Hp[:, None, :])
        np.add.at(g["out_b"], bi, dlogits)
        g["gru_Wx"][...] = np.einsum("tbd,tbg->bdg", X, dA)
        g["gru_Wh"][...] = np.einsum("tbh,tbg->bhg", Hs[:-1], dC)
        g["gru_b"][...] = dA.sum(axis=0)
        rows = np.broadcast_to(np.arange(B)[None, :], locs_t.shape)
        np.add.at(g["loc_emb"], (rows, locs_t), dX[..., :dl])
        g["h0_W"][...] = p["user_emb"][users][:, :, None] * dh0pre[:, None, :]
        g["h0_b"][...] = dh0pre
        g["user_emb"][np.arange(B), users] = dh0pre @ p["h0_W"].T
        return loss, grad

    def grad(self, examples: Sequence[tuple], per_example: bool = False):
        """Gradient of the mean loss over ``(user, locs, times, target)`` examples."""
        return self.loss_and_grad(SequenceBatch.from_examples(examples), per_example)[1]

    # -- checkpoints ------------------------------------------------------

    def metadata(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "config": asdict(self.config),
            "n_users": self.n_users,
            "n_locations": self.n_locations,
            "mask_token": self.mask_token,
            "epoch": self.epoch,
            "rng_state": self.rng.bit_generator.state,
            "param_names": list(self.PARAM_NAMES),
            "backend": _backend.BACKEND,
        }

    def save(self, path) -> None:
        """Write a zip of ``meta.json`` plus one ``.npy`` per parameter (byte-stable)."""
        buf = io.BytesIO()
        with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
            meta = json.dumps(self.metadata(), sort_keys=True, default=int).encode()
            zf.writestr(zipfile.ZipInfo("meta.json", date_time=(1980, 1, 1, 0, 0, 0)), meta)
            for name in self.PARAM_NAMES:
                arr = io.BytesIO()
                np.lib.format.write_array(arr, np.ascontiguousarray(self.params[name]), allow_pickle=False)
                zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), arr.getvalue())
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path) -> "PoiModel":
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            if meta.get("format") != CHECKPOINT_FORMAT:
                raise ValueError(f"unknown checkpoint format {meta.get('format')!r}")
            model = cls(meta["n_users"], meta["n_locations"], ModelConfig(**meta["config"]),
                        meta["mask_token"], init=False)
            for name in cls.PARAM_NAMES:
                arr = np.lib.format.read_array(io.BytesIO(zf.read(f"{name}.npy")), allow_pickle=False)
                model.params[name][...] = arr
        model.epoch = meta["epoch"]
        model.rng.bit_generator.state = meta["rng_state"]
        return model


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
