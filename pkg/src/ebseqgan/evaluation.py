"""Evaluation metrics.  All log-likelihoods are in nats.

``hit_at_k`` is the usual next-item recall: the true history is always fed in,
so it says nothing about errors that compound when the recommender consumes
its own output (auto-play).  ``oracle_nll`` in the ``reverse`` direction scores
whole generated sequences and is the better signal for that failure mode.
"""
from __future__ import annotations

import numpy as np

from .gan_trainer import METRIC_FIELDS, all_sequences
from .maxent_il import (ENUMERATION_LIMIT, DemoSet, ExactDistribution, InstanceTooLarge,
                        chain_statistics, markov_chain_tables)
from .numerics import Rng, make_rng, softmax_rows
from .seq_models import (RecurrentGenerator, TabularGenerator, _Generator, as_batch,
                         feature_counts_batch, feature_mean, next_step_dist, sample_batch)


def _is_chain(gen) -> bool:
    return isinstance(gen, TabularGenerator) and gen.order == 1


def sequence_entropy(gen, T: int) -> float:
    """Exact entropy of the length-``T`` sequence distribution of ``gen``."""
    if _is_chain(gen):
        return chain_statistics(*markov_chain_tables(gen, T))["entropy"]
    seqs = all_sequences(gen.vocab_size, T)
    lp = gen.log_probs(seqs).sum(axis=1)
    return float(-np.sum(np.exp(lp) * lp))


def _cross_entropy_exact(sampler, scorer, T: int) -> float:
    """``E_{S ~ sampler}[-log scorer(S)]`` computed exactly."""
    if _is_chain(sampler) and _is_chain(scorer):
        s_init, s_cond = markov_chain_tables(sampler, T)
        q_init, q_cond = markov_chain_tables(scorer, T)
        stats = chain_statistics(s_init, s_cond)
        out = -np.sum(stats["marginals"][0] * q_init)
        for pair, lq in zip(stats["pairs"], q_cond):
            out -= np.sum(pair * lq)
        return float(out)
    if sampler.vocab_size ** T > ENUMERATION_LIMIT:
        raise InstanceTooLarge("exact NLL needs order-1 tabular models or an enumerable instance")
    seqs = all_sequences(sampler.vocab_size, T)
    p = np.exp(sampler.log_probs(seqs).sum(axis=1))
    return float(-np.sum(p * scorer.log_probs(seqs).sum(axis=1)))


def oracle_nll(gen, oracle, T: int, direction: str = "forward", mode: str = "auto",
               n: int = 10000, rng: Rng | None = None, return_stderr: bool = False):
    """Oracle negative log-likelihood per sequence.

    ``forward`` is ``E_oracle[-log p_G(S)]``, ``reverse`` is
    ``E_{p_G}[-log p_oracle(S)]``.  ``mode`` is ``exact``, ``mc`` (``n``
    samples) or ``auto`` (exact when affordable, else Monte Carlo).
    """
    ref = oracle.as_generator() if hasattr(oracle, "as_generator") else oracle
    if ref.vocab_size != gen.vocab_size:
        raise ValueError("generator and oracle vocabularies differ")
    if direction not in ("forward", "reverse"):
        raise ValueError(f"unknown direction {direction!r}")
    sampler, scorer = (ref, gen) if direction == "forward" else (gen, ref)
    if mode == "auto":
        exact_ok = (_is_chain(sampler) and _is_chain(scorer)) or gen.vocab_size ** T <= 10 ** 5
        mode = "exact" if exact_ok else "mc"
    if mode == "exact":
        val = _cross_entropy_exact(sampler, scorer, T)
        return (val, 0.0) if return_stderr else val
    if mode != "mc":
        raise ValueError(f"unknown mode {mode!r}")
    seqs, _ = sample_batch(sampler, n, T, rng if rng is not None else make_rng(0))
    vals = -scorer.log_probs(seqs).sum(axis=1)
    if return_stderr:
        return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n))
    return float(vals.mean())


def expected_features(src, V: int, T: int | None = None) -> np.ndarray:
    """Feature mean of a model, exact distribution, demo set, batch, or vector."""
    if isinstance(src, ExactDistribution):
        return src.feature_expectation
    if isinstance(src, DemoSet):
        return src.feature_mean
    if isinstance(src, _Generator):
        if T is None:
            raise ValueError("a horizon is needed to take expectations under a generator")
        if _is_chain(src):
            return chain_statistics(*markov_chain_tables(src, T))["feature_expectation"]
        seqs = all_sequences(V, T)
        return np.exp(src.log_probs(seqs).sum(axis=1)) @ feature_counts_batch(seqs, V)
    arr = np.asarray(src)
    if arr.ndim == 1 and arr.dtype.kind == "f":
        return arr
    return feature_mean(as_batch(arr, V), V)


def feature_gap(a, b, V: int, T: int | None = None) -> float:
    fa, fb = expected_features(a, V, T), expected_features(b, V, T)
    if fa.shape != fb.shape:
        raise ValueError(f"feature dimensions differ: {fa.shape} vs {fb.shape}")
    return float(np.max(np.abs(fa - fb)))


def recommend_topk(gen, prefix, k: int) -> list[tuple[int, float]]:
    """Top-``k`` next items by probability; ties go to the smaller item id."""
    if not 1 <= k <= gen.vocab_size:
        raise ValueError(f"k must be in [1, {gen.vocab_size}]")
    p = next_step_dist(gen, prefix)
    order = np.argsort(-p, kind="stable")[:k]
    return [(int(i), float(p[i])) for i in order]


def step_distributions(gen, seqs: np.ndarray) -> np.ndarray:
    """Teacher-forced next-item distributions at every position, ``(B, L, V)``."""
    if isinstance(gen, TabularGenerator):
        return np.stack([softmax_rows(gen.logits_at(seqs, t)) for t in range(seqs.shape[1])], axis=1)
    if isinstance(gen, RecurrentGenerator):
        return np.stack([softmax_rows(z) for z in gen.forward(seqs)[2]], axis=1)
    raise TypeError(f"unsupported generator {type(gen).__name__}")


def hit_at_k(gen, heldout, k: int) -> float:
    """Fraction of positions ``t >= 2`` whose true item is in the top-``k`` list."""
    seqs = heldout.seqs if isinstance(heldout, DemoSet) else as_batch(heldout, gen.vocab_size)
    if seqs.shape[0] == 0:
        raise ValueError("empty held-out set")
    if not 1 <= k <= gen.vocab_size:
        raise ValueError(f"k must be in [1, {gen.vocab_size}]")
    if seqs.shape[1] < 2:
        raise ValueError("held-out sequences need at least two items")
    probs = step_distributions(gen, seqs)[:, 1:, :]
    truth = seqs[:, 1:]
    p_true = np.take_along_axis(probs, truth[..., None], axis=2)
    ids = np.arange(gen.vocab_size)
    ahead = (probs > p_true) | ((probs == p_true) & (ids < truth[..., None]))
    rank = ahead.sum(axis=2)
    return float(np.mean(rank < k))


def metric_row(**values) -> dict:
    unknown = set(values) - set(METRIC_FIELDS)
    if unknown:
        raise ValueError(f"unknown metric fields {sorted(unknown)}")
    return {name: values.get(name) for name in METRIC_FIELDS}
