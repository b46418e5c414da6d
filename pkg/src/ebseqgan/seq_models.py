"""Autoregressive item-sequence generators and scalar sequence energies.

Every model is an immutable value holding one flat float64 parameter vector;
``with_params`` returns an updated copy.  Sequences are integer arrays of item
ids in ``[0, V)``; batched methods take a 2-d ``(batch, length)`` array.

Flattened parameter layouts (row-major reshapes, concatenated in this order)

TabularGenerator
    one logit table per *slot*.  Homogeneous models have slots ``j = 0..k``
    (context length ``j``, shape ``(V**j, V)``), and position ``t`` (0-based)
    uses slot ``min(t, k)``.  Time-indexed models have one slot per position
    ``t = 0..T-1`` with shape ``(V**min(t, k), V)``.  A context
    ``(c_1, ..., c_j)`` (oldest first) is row ``sum_i c_i * V**(j - i)``.
RecurrentGenerator
    ``emb (V, E), bos (E), W_xh (E, H), W_hh (H, H), b_h (H), h0 (H),
    W_out (H, V), b_out (V)``
LinearEnergy
    ``c0 (V), c (V, V)``; identical to the :func:`feature_counts` layout.
RecurrentEnergy
    ``emb (V, E), W_xh (E, H), W_hh (H, H), b_h (H), h0 (H), w_out (H),
    b_out (1)``
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence as SeqType

import numpy as np

from .numerics import Rng, categorical_sample_rows, log_softmax_rows, make_rng, softmax_rows


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        tokens = tuple(str(t) for t in self.tokens)
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(tokens)})

    @classmethod
    def synthetic(cls, size: int) -> "Vocabulary":
        return cls(tuple(f"i{i}" for i in range(size)))

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise KeyError(f"unknown token {token!r}") from None

    def encode(self, tokens) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.tokens[int(i)] for i in ids]


def as_batch(seqs, vocab_size: int) -> np.ndarray:
    """Validate ids and return a 2-d int64 array (a 1-d input becomes one row)."""
    arr = np.asarray(seqs, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"expected a sequence or batch of sequences, got shape {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() >= vocab_size):
        raise ValueError(f"item id out of vocabulary range [0, {vocab_size})")
    return arr


def _frozen(params) -> np.ndarray:
    p = np.array(params, dtype=np.float64).ravel()
    p.flags.writeable = False
    return p


def _split(params: np.ndarray, shapes: list[tuple[int, ...]]) -> list[np.ndarray]:
    out, pos = [], 0
    for shape in shapes:
        n = int(np.prod(shape))
        out.append(params[pos:pos + n].reshape(shape))
        pos += n
    return out


class _Model:
    params: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "params", _frozen(self.params))
        if self.params.size != self.n_params:
            raise ValueError(f"{type(self).__name__} expects {self.n_params} parameters, "
                             f"got {self.params.size}")

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes())

    def shapes(self) -> list[tuple[int, ...]]:
        raise NotImplementedError

    def with_params(self, params):
        return dataclasses.replace(self, params=params)


# ---------------------------------------------------------------------------
# generators


class _Generator(_Model):
    vocab_size: int

    def log_probs(self, seqs: np.ndarray) -> np.ndarray:
        """Per-step ``log p(s_t | s_<t)`` for a batch, shape ``(B, L)``."""
        raise NotImplementedError

    def grad_weighted(self, seqs: np.ndarray, weights: np.ndarray) -> np.ndarray:
        """Gradient of ``sum_{b,t} weights[b,t] * log p(s_bt | s_b<t)``."""
        raise NotImplementedError

    def complete(self, prefixes: np.ndarray, T: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
        """Sample continuations of every prefix row up to length ``T``.

        Returns the completed ``(B, T)`` batch and the per-step log-probs of all
        ``T`` positions (prefix positions included).  One uniform is consumed
        per sampled item, position-major.
        """
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class TabularGenerator(_Generator):
    vocab_size: int
    order: int = 1
    params: np.ndarray = None
    time_indexed: bool = False
    horizon: int | None = None

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("context order must be >= 1")
        if self.time_indexed and not self.horizon:
            raise ValueError("time-indexed tables need a horizon")
        if self.params is None:
            object.__setattr__(self, "params", np.zeros(self.n_params))
        super().__post_init__()

    @property
    def kind(self) -> str:
        return "tabular"

    def _slot_ctx_lens(self) -> list[int]:
        if self.time_indexed:
            return [min(t, self.order) for t in range(self.horizon)]
        return list(range(self.order + 1))

    def shapes(self):
        V = self.vocab_size
        return [(V ** j, V) for j in self._slot_ctx_lens()]

    def tables(self, params=None) -> list[np.ndarray]:
        return _split(self.params if params is None else params, self.shapes())

    def slot(self, t: int) -> int:
        if self.time_indexed:
            if t >= self.horizon:
                raise ValueError(f"position {t} beyond horizon {self.horizon}")
            return t
        return min(t, self.order)

    def context_index(self, seqs: np.ndarray, t: int) -> np.ndarray:
        j = min(t, self.order)
        idx = np.zeros(seqs.shape[0], dtype=np.int64)
        for col in range(t - j, t):
            idx = idx * self.vocab_size + seqs[:, col]
        return idx

    def logits_at(self, seqs: np.ndarray, t: int) -> np.ndarray:
        return self.tables()[self.slot(t)][self.context_index(seqs, t)]

    def log_probs(self, seqs):
        seqs = as_batch(seqs, self.vocab_size)
        B, L = seqs.shape
        out = np.empty((B, L))
        rows = np.arange(B)
        for t in range(L):
            out[:, t] = log_softmax_rows(self.logits_at(seqs, t))[rows, seqs[:, t]]
        return out

    def grad_weighted(self, seqs, weights):
        seqs = as_batch(seqs, self.vocab_size)
        weights = np.broadcast_to(np.asarray(weights, dtype=np.float64), seqs.shape)
        grad = np.zeros(self.n_params)
        gtables = self.tables(grad)
        rows = np.arange(seqs.shape[0])
        for t in range(seqs.shape[1]):
            ctx = self.context_index(seqs, t)
            g = -softmax_rows(self.tables()[self.slot(t)][ctx])
            g[rows, seqs[:, t]] += 1.0
            np.add.at(gtables[self.slot(t)], ctx, weights[:, t, None] * g)
        return grad

    def complete(self, prefixes, T, rng):
        prefixes = as_batch(prefixes, self.vocab_size)
        B, L = prefixes.shape
        seqs = np.zeros((B, T), dtype=np.int64)
        seqs[:, :L] = prefixes
        logp = np.empty((B, T))
        rows = np.arange(B)
        for t in range(T):
            lp = log_softmax_rows(self.logits_at(seqs, t))
            if t >= L:
                seqs[:, t] = categorical_sample_rows(np.exp(lp), rng)
            logp[:, t] = lp[rows, seqs[:, t]]
        return seqs, logp


@dataclass(frozen=True, eq=False)
class RecurrentGenerator(_Generator):
    """Single-layer tanh RNN with a learned begin-of-sequence input."""

    vocab_size: int
    embed_dim: int
    hidden_dim: int
    params: np.ndarray = None

    def __post_init__(self):
        if self.params is None:
            object.__setattr__(self, "params", np.zeros(self.n_params))
        super().__post_init__()

    @property
    def kind(self) -> str:
        return "recurrent"

    def shapes(self):
        V, E, H = self.vocab_size, self.embed_dim, self.hidden_dim
        return [(V, E), (E,), (E, H), (H, H), (H,), (H,), (H, V), (V,)]

    def unpack(self, params=None):
        return _split(self.params if params is None else params, self.shapes())

    def initial_state(self, batch: int) -> np.ndarray:
        h0 = self.unpack()[5]
        return np.tile(h0, (batch, 1))

    def _inputs(self, seqs: np.ndarray, t: int) -> np.ndarray:
        emb, bos = self.unpack()[:2]
        if t == 0:
            return np.tile(bos, (seqs.shape[0], 1))
        return emb[seqs[:, t - 1]]

    def step(self, h: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        _, _, W_xh, W_hh, b_h, _, W_out, b_out = self.unpack()
        h = np.tanh(x @ W_xh + h @ W_hh + b_h)
        return h, h @ W_out + b_out

    def forward(self, seqs: np.ndarray):
        """Teacher-forced pass; returns inputs, hidden states and logits per position."""
        B, L = seqs.shape
        h = self.initial_state(B)
        xs, hs, logits = [], [h], []
        for t in range(L):
            x = self._inputs(seqs, t)
            h, z = self.step(h, x)
            xs.append(x)
            hs.append(h)
            logits.append(z)
        return xs, hs, logits

    def log_probs(self, seqs):
        seqs = as_batch(seqs, self.vocab_size)
        _, _, logits = self.forward(seqs)
        rows = np.arange(seqs.shape[0])
        return np.stack([log_softmax_rows(z)[rows, seqs[:, t]] for t, z in enumerate(logits)], axis=1)

    def grad_weighted(self, seqs, weights):
        seqs = as_batch(seqs, self.vocab_size)
        B, L = seqs.shape
        weights = np.broadcast_to(np.asarray(weights, dtype=np.float64), seqs.shape)
        _, _, W_xh, W_hh, _, _, W_out, _ = self.unpack()
        grad = np.zeros(self.n_params)
        d_emb, d_bos, d_Wxh, d_Whh, d_bh, d_h0, d_Wout, d_bout = self.unpack(grad)
        xs, hs, logits = self.forward(seqs)
        rows = np.arange(B)
        dh_next = np.zeros((B, self.hidden_dim))
        for t in reversed(range(L)):
            dz = -softmax_rows(logits[t])
            dz[rows, seqs[:, t]] += 1.0
            dz *= weights[:, t, None]
            h, h_prev = hs[t + 1], hs[t]
            d_Wout += h.T @ dz
            d_bout += dz.sum(axis=0)
            da = (dz @ W_out.T + dh_next) * (1.0 - h * h)
            d_Wxh += xs[t].T @ da
            d_Whh += h_prev.T @ da
            d_bh += da.sum(axis=0)
            dx = da @ W_xh.T
            if t == 0:
                d_bos += dx.sum(axis=0)
            else:
                np.add.at(d_emb, seqs[:, t - 1], dx)
            dh_next = da @ W_hh.T
        d_h0 += dh_next.sum(axis=0)
        return grad

    def complete(self, prefixes, T, rng):
        prefixes = as_batch(prefixes, self.vocab_size)
        B, L = prefixes.shape
        seqs = np.zeros((B, T), dtype=np.int64)
        seqs[:, :L] = prefixes
        logp = np.empty((B, T))
        rows = np.arange(B)
        h = self.initial_state(B)
        for t in range(T):
            h, z = self.step(h, self._inputs(seqs, t))
            lp = log_softmax_rows(z)
            if t >= L:
                seqs[:, t] = categorical_sample_rows(np.exp(lp), rng)
            logp[:, t] = lp[rows, seqs[:, t]]
        return seqs, logp


Generator = TabularGenerator | RecurrentGenerator


# ---------------------------------------------------------------------------
# energies


def feature_counts(seq, vocab_size: int) -> np.ndarray:
    """Initial-item one-hot plus ordered transition counts, length ``V + V*V``."""
    return _feature_sum(as_batch(seq, vocab_size), vocab_size, np.ones(1))


def _feature_sum(seqs: np.ndarray, V: int, weights: np.ndarray) -> np.ndarray:
    weights = np.broadcast_to(np.asarray(weights, dtype=np.float64), (seqs.shape[0],))
    out = np.zeros(V + V * V)
    np.add.at(out, seqs[:, 0], weights)
    if seqs.shape[1] > 1:
        pair = V + seqs[:, :-1] * V + seqs[:, 1:]
        np.add.at(out, pair.ravel(), np.repeat(weights, seqs.shape[1] - 1))
    return out


def feature_counts_batch(seqs, vocab_size: int) -> np.ndarray:
    """Per-row feature counts, shape ``(B, V + V*V)``."""
    seqs = as_batch(seqs, vocab_size)
    V = vocab_size
    out = np.zeros((seqs.shape[0], V + V * V))
    rows = np.arange(seqs.shape[0])
    out[rows, seqs[:, 0]] += 1.0
    for t in range(1, seqs.shape[1]):
        np.add.at(out, (rows, V + seqs[:, t - 1] * V + seqs[:, t]), 1.0)
    return out


def feature_mean(seqs, vocab_size: int) -> np.ndarray:
    seqs = as_batch(seqs, vocab_size)
    return _feature_sum(seqs, vocab_size, np.ones(1)) / seqs.shape[0]


class _Energy(_Model):
    vocab_size: int

    def energies(self, seqs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad_weighted(self, seqs: np.ndarray, weights: np.ndarray) -> np.ndarray:
        """Gradient of ``sum_b weights[b] * energy(seqs[b])``."""
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class LinearEnergy(_Energy):
    """Transition cost ``c0[s_1] + sum_t c[s_{t-1}, s_t]``."""

    vocab_size: int
    params: np.ndarray = None

    def __post_init__(self):
        if self.params is None:
            object.__setattr__(self, "params", np.zeros(self.n_params))
        super().__post_init__()

    @property
    def kind(self) -> str:
        return "linear"

    def shapes(self):
        V = self.vocab_size
        return [(V,), (V, V)]

    @property
    def initial_cost(self) -> np.ndarray:
        return self.params[:self.vocab_size]

    @property
    def transition_cost(self) -> np.ndarray:
        V = self.vocab_size
        return self.params[V:].reshape(V, V)

    def energies(self, seqs):
        seqs = as_batch(seqs, self.vocab_size)
        c = self.transition_cost
        out = self.initial_cost[seqs[:, 0]].copy()
        for t in range(1, seqs.shape[1]):
            out += c[seqs[:, t - 1], seqs[:, t]]
        return out

    def grad_weighted(self, seqs, weights):
        seqs = as_batch(seqs, self.vocab_size)
        return _feature_sum(seqs, self.vocab_size, weights)


@dataclass(frozen=True, eq=False)
class RecurrentEnergy(_Energy):
    """Tanh RNN over the items with a linear readout of the last hidden state."""

    vocab_size: int
    embed_dim: int
    hidden_dim: int
    params: np.ndarray = None

    def __post_init__(self):
        if self.params is None:
            object.__setattr__(self, "params", np.zeros(self.n_params))
        super().__post_init__()

    @property
    def kind(self) -> str:
        return "recurrent"

    def shapes(self):
        V, E, H = self.vocab_size, self.embed_dim, self.hidden_dim
        return [(V, E), (E, H), (H, H), (H,), (H,), (H,), (1,)]

    def unpack(self, params=None):
        return _split(self.params if params is None else params, self.shapes())

    def _forward(self, seqs):
        emb, W_xh, W_hh, b_h, h0, _, _ = self.unpack()
        hs = [np.tile(h0, (seqs.shape[0], 1))]
        for t in range(seqs.shape[1]):
            hs.append(np.tanh(emb[seqs[:, t]] @ W_xh + hs[-1] @ W_hh + b_h))
        return hs

    def energies(self, seqs):
        seqs = as_batch(seqs, self.vocab_size)
        w_out, b_out = self.unpack()[5:]
        return self._forward(seqs)[-1] @ w_out + b_out[0]

    def grad_weighted(self, seqs, weights):
        seqs = as_batch(seqs, self.vocab_size)
        weights = np.broadcast_to(np.asarray(weights, dtype=np.float64), (seqs.shape[0],))
        emb, W_xh, W_hh, _, _, w_out, _ = self.unpack()
        grad = np.zeros(self.n_params)
        d_emb, d_Wxh, d_Whh, d_bh, d_h0, d_wout, d_bout = self.unpack(grad)
        hs = self._forward(seqs)
        d_wout += weights @ hs[-1]
        d_bout += weights.sum()
        dh = np.outer(weights, w_out)
        for t in reversed(range(seqs.shape[1])):
            da = dh * (1.0 - hs[t + 1] ** 2)
            x = emb[seqs[:, t]]
            d_Wxh += x.T @ da
            d_Whh += hs[t].T @ da
            d_bh += da.sum(axis=0)
            np.add.at(d_emb, seqs[:, t], da @ W_xh.T)
            dh = da @ W_hh.T
        d_h0 += dh.sum(axis=0)
        return grad


EnergyModel = LinearEnergy | RecurrentEnergy


# ---------------------------------------------------------------------------
# functional surface


def gen_init(kind: str, vocab_size: int, *, order: int = 1, embed_dim: int = 8,
             hidden_dim: int = 16, seed: int = 0, time_indexed: bool = False,
             horizon: int | None = None) -> Generator:
    """Fresh generator: zero logits for ``tabular``, N(0, 0.1^2) weights for ``recurrent``."""
    if vocab_size < 2:
        raise ValueError("vocabulary must contain at least two items")
    if kind == "tabular":
        return TabularGenerator(vocab_size, order, time_indexed=time_indexed, horizon=horizon)
    if kind == "recurrent":
        if embed_dim < 1 or hidden_dim < 1:
            raise ValueError("recurrent dims must be >= 1")
        g = RecurrentGenerator(vocab_size, embed_dim, hidden_dim)
        return g.with_params(0.1 * make_rng(seed).standard_normal(g.n_params))
    raise ValueError(f"unknown generator kind {kind!r}")


def energy_init(kind: str, vocab_size: int, *, embed_dim: int = 8, hidden_dim: int = 16,
                seed: int = 0) -> EnergyModel:
    if vocab_size < 2:
        raise ValueError("vocabulary must contain at least two items")
    if kind == "linear":
        return LinearEnergy(vocab_size)
    if kind == "recurrent":
        e = RecurrentEnergy(vocab_size, embed_dim, hidden_dim)
        return e.with_params(0.1 * make_rng(seed).standard_normal(e.n_params))
    raise ValueError(f"unknown energy kind {kind!r}")


def next_step_dist(gen: Generator, prefix: SeqType[int]) -> np.ndarray:
    prefix = np.asarray(prefix, dtype=np.int64).reshape(1, -1)
    if prefix.size and (prefix.min() < 0 or prefix.max() >= gen.vocab_size):
        raise ValueError("prefix contains an out-of-vocabulary id")
    t = prefix.shape[1]
    if isinstance(gen, TabularGenerator):
        return softmax_rows(gen.logits_at(prefix, t))[0]
    h = gen.initial_state(1)
    padded = np.concatenate([prefix, np.zeros((1, 1), dtype=np.int64)], axis=1)
    for s in range(t + 1):
        h, z = gen.step(h, gen._inputs(padded, s))
    return softmax_rows(z)[0]


def sample_sequence(gen: Generator, T: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Draw one length-``T`` sequence; returns it with its per-step log-probs."""
    if T < 1:
        raise ValueError("horizon must be >= 1")
    seqs, logp = gen.complete(np.zeros((1, 0), dtype=np.int64), T, rng)
    return seqs[0], logp[0]


def sample_batch(gen: Generator, n: int, T: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    return gen.complete(np.zeros((n, 0), dtype=np.int64), T, rng)


def log_prob(gen: Generator, seq) -> float:
    return float(gen.log_probs(seq)[0].sum())


def grad_log_prob(gen: Generator, seq) -> np.ndarray:
    return gen.grad_weighted(seq, 1.0)


def energy(e: EnergyModel, seq) -> float:
    return float(e.energies(seq)[0])


def grad_energy(e: EnergyModel, seq) -> np.ndarray:
    return e.grad_weighted(seq, 1.0)
