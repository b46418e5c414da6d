"""Exact maximum-entropy imitation learning on item chains.

The model family is ``P(S) = exp(-c(S)) / Z`` with ``c`` a
:class:`~ebseqgan.seq_models.LinearEnergy` (initial cost plus transition
costs, so ``c(S) = c . f(S)`` for the occurrence features ``f``).  Because the
"action" is the next item, the distribution is a (time-inhomogeneous) Markov
chain and ``log Z`` follows from a backward log-sum-exp recursion.

Sign conventions, used throughout:

* demo log-likelihood  ``LL(c) = -mean_demo c(S) - log Z(c)``
* ``exact_ll_grad`` returns ``dLL/dc = -E_demo[f] + E_P[f]``
* the cost step *ascends* ``-E_demo[c] + E_q[c]`` whose gradient is
  ``-E_demo[f] + E_q[f]``; with ``q = P`` the two coincide
* the discriminator step *descends* its hinge loss, so its update direction
  is ``-discriminator_grad``
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gan_trainer import all_sequences, discriminator_grad, exact_generator_grad
from .numerics import Rng, log_softmax_rows, log_sum_exp, make_rng
from .seq_models import (LinearEnergy, TabularGenerator, as_batch, feature_counts_batch,
                         feature_mean, sample_batch)

ENUMERATION_LIMIT = 10 ** 6


class InstanceTooLarge(ValueError):
    pass


@dataclass
class DemoSet:
    seqs: np.ndarray
    vocab_size: int
    _feature_mean: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.seqs = as_batch(self.seqs, self.vocab_size)

    def __len__(self) -> int:
        return self.seqs.shape[0]

    @property
    def horizon(self) -> int:
        return self.seqs.shape[1]

    @property
    def feature_mean(self) -> np.ndarray:
        if self._feature_mean is None:
            self._feature_mean = feature_mean(self.seqs, self.vocab_size)
        return self._feature_mean


@dataclass
class TabularMaxEntProblem:
    cost: LinearEnergy
    horizon: int
    demos: DemoSet | None = None
    order: int = 1

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not np.all(np.isfinite(self.cost.params)):
            raise ValueError("costs must be finite")
        if self.demos is not None and self.demos.horizon != self.horizon:
            raise ValueError("demos do not match the horizon")


@dataclass
class ExactDistribution:
    representation: str  # "enumerated" or "dp"
    vocab_size: int
    horizon: int
    log_z: float
    cost: LinearEnergy
    feature_expectation: np.ndarray
    sequences: np.ndarray | None = None
    probs: np.ndarray | None = None
    soft_values: np.ndarray | None = None
    init_log_probs: np.ndarray | None = None
    cond_log_probs: np.ndarray | None = None

    def log_prob(self, seqs) -> np.ndarray:
        seqs = as_batch(seqs, self.vocab_size)
        if self.representation == "enumerated":
            keys = np.ravel_multi_index(seqs.T, (self.vocab_size,) * self.horizon)
            return np.log(self.probs[keys])
        out = self.init_log_probs[seqs[:, 0]].copy()
        for t in range(1, self.horizon):
            out += self.cond_log_probs[t - 1][seqs[:, t - 1], seqs[:, t]]
        return out


def _features(demos, V: int) -> np.ndarray:
    """Demo feature mean from a DemoSet, a sequence batch, or a ready-made vector."""
    if isinstance(demos, DemoSet):
        return demos.feature_mean
    arr = np.asarray(demos)
    if arr.ndim == 1 and arr.dtype.kind == "f" and arr.size == V + V * V:
        return arr.astype(np.float64)
    arr = as_batch(arr, V)
    if arr.shape[0] == 0:
        raise ValueError("empty demonstration set")
    return feature_mean(arr, V)


def enumerate_distribution(c: LinearEnergy, V: int, T: int) -> ExactDistribution:
    if V ** T > ENUMERATION_LIMIT:
        raise InstanceTooLarge(f"V**T = {V ** T} exceeds the enumeration limit {ENUMERATION_LIMIT}")
    seqs = all_sequences(V, T)
    neg = -c.energies(seqs)
    log_z = log_sum_exp(neg)
    probs = np.exp(neg - log_z)
    fexp = probs @ feature_counts_batch(seqs, V)
    return ExactDistribution("enumerated", V, T, log_z, c, fexp, sequences=seqs, probs=probs)


def chain_statistics(init_lp: np.ndarray, cond_lp: np.ndarray) -> dict:
    """Marginals and expectations of a first-order chain given its log tables.

    ``cond_lp[t]`` holds ``log q(s_{t+1} = b | s_t = a)`` (0-based positions).
    Returns state marginals, pair marginals, feature expectation and entropy.
    """
    V = init_lp.size
    mu = [np.exp(init_lp)]
    pairs = []
    ent = -np.sum(mu[0] * np.where(mu[0] > 0, init_lp, 0.0))
    for lp in cond_lp:
        cond = np.exp(lp)
        pair = mu[-1][:, None] * cond
        ent -= np.sum(pair * np.where(cond > 0, lp, 0.0))
        pairs.append(pair)
        mu.append(pair.sum(axis=0))
    fexp = np.zeros(V + V * V)
    fexp[:V] = mu[0]
    for pair in pairs:
        fexp[V:] += pair.ravel()
    return {"marginals": mu, "pairs": pairs, "feature_expectation": fexp, "entropy": float(ent)}


def partition_dp(c: LinearEnergy, V: int, T: int, order: int = 1) -> ExactDistribution:
    """Backward soft-value recursion for ``log Z`` plus a forward pass for ``E_P[f]``."""
    if order != 1:
        raise ValueError("the chain recursion is exact only for context order 1")
    c0, C = c.initial_cost, c.transition_cost
    W = np.zeros((T, V))
    for t in range(T - 2, -1, -1):
        W[t] = log_sum_exp(-C + W[t + 1][None, :], axis=1)
    log_z = log_sum_exp(-c0 + W[0])
    init_lp = -c0 + W[0] - log_z
    cond_lp = np.stack([-C + W[t + 1][None, :] - W[t][:, None] for t in range(T - 1)]) \
        if T > 1 else np.zeros((0, V, V))
    stats = chain_statistics(init_lp, cond_lp)
    return ExactDistribution("dp", V, T, log_z, c, stats["feature_expectation"],
                             soft_values=W, init_log_probs=init_lp, cond_log_probs=cond_lp)


def markov_chain_tables(q: TabularGenerator, T: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-position log tables of an order-1 tabular generator."""
    if not isinstance(q, TabularGenerator) or q.order != 1:
        raise ValueError("expected an order-1 tabular generator")
    tables = q.tables()
    init_lp = log_softmax_rows(tables[q.slot(0)][0])
    cond = [log_softmax_rows(tables[q.slot(t)]) for t in range(1, T)]
    return init_lp, (np.stack(cond) if cond else np.zeros((0, q.vocab_size, q.vocab_size)))


def _cost_per_position(c: LinearEnergy, T: int) -> list[np.ndarray]:
    return [c.initial_cost[None, :]] + [c.transition_cost] * (T - 1)


def variational_objective(q: TabularGenerator, c: LinearEnergy, T: int) -> float:
    """``E_q[c] - H(q)`` over length-``T`` sequences, by chain DP."""
    stats = chain_statistics(*markov_chain_tables(q, T))
    return float(c.params @ stats["feature_expectation"] - stats["entropy"])


def variational_grad(q: TabularGenerator, c: LinearEnergy, T: int) -> np.ndarray:
    """Gradient of :func:`variational_objective` in ``q``'s logits, by chain DP.

    With soft action values ``A_t(a,b) = c_t(a,b) + log q_t(b|a) + V_{t+1}(b)``
    and ``V_t(a) = sum_b q_t(b|a) A_t(a,b)``, the logit gradient at position
    ``t`` is ``mu_t(a) q_t(b|a) (A_t(a,b) - V_t(a))``.
    """
    V = q.vocab_size
    init_lp, cond_lp = markov_chain_tables(q, T)
    logs = [init_lp[None, :]] + list(cond_lp)
    costs = _cost_per_position(c, T)
    mu = chain_statistics(init_lp, cond_lp)["marginals"]
    grad = np.zeros(q.n_params)
    gtables = q.tables(grad)
    v_next = np.zeros(V)
    for t in range(T - 1, -1, -1):
        probs = np.exp(logs[t])
        adv = costs[t] + logs[t] + v_next[None, :]
        v_t = (probs * adv).sum(axis=1)
        weight = (np.ones(1) if t == 0 else mu[t - 1])[:, None]
        gtables[q.slot(t)] += weight * probs * (adv - v_t[:, None])
        v_next = v_t
    return grad


def soft_dp_policy(c: LinearEnergy, V: int, T: int, dist: ExactDistribution | None = None
                   ) -> TabularGenerator:
    """Exact minimizer of ``E_q[c] - H(q)``: a time-indexed order-1 chain equal to ``P``."""
    if dist is None or dist.representation != "dp":
        dist = partition_dp(c, V, T)
    tables = [dist.init_log_probs[None, :]] + list(dist.cond_log_probs)
    q = TabularGenerator(V, 1, time_indexed=True, horizon=T)
    return q.with_params(np.concatenate([t.ravel() for t in tables]))


def kl_divergence(q, P: ExactDistribution) -> float:
    """``KL(q || P)`` in nats: by enumeration when ``P`` is enumerated, else by chain DP."""
    V, T = P.vocab_size, P.horizon
    if P.representation == "enumerated":
        logq = q.log_probs(P.sequences).sum(axis=1)
        return float(np.sum(np.exp(logq) * (logq - np.log(P.probs))))
    if isinstance(q, TabularGenerator) and q.order == 1:
        stats = chain_statistics(*markov_chain_tables(q, T))
        return float(-stats["entropy"] + P.cost.params @ stats["feature_expectation"] + P.log_z)
    if V ** T <= ENUMERATION_LIMIT:
        return kl_divergence(q, enumerate_distribution(P.cost, V, T))
    raise InstanceTooLarge("KL needs an order-1 tabular q or an enumerable instance")


def demo_log_likelihood(c: LinearEnergy, demos, T: int) -> float:
    V = c.vocab_size
    return float(-(c.params @ _features(demos, V)) - partition_dp(c, V, T).log_z)


def exact_ll_grad(c: LinearEnergy, demos, T: int | None = None) -> np.ndarray:
    """``dLL/dc = -E_demo[f] + E_P[f]`` with ``E_P[f]`` from the chain DP."""
    V = c.vocab_size
    if T is None:
        if isinstance(demos, DemoSet):
            T = demos.horizon
        else:
            T = as_batch(demos, V).shape[1]
    return -_features(demos, V) + partition_dp(c, V, T).feature_expectation


@dataclass
class ILConfig:
    horizon: int
    lr: float = 1.0
    max_rounds: int = 2000
    tol: float = 1e-3
    max_halvings: int = 60


def cost_step_grad(q: TabularGenerator, demo_features: np.ndarray, T: int) -> np.ndarray:
    """Gradient in ``c`` of ``-E_demo[c] + E_q[c]`` (linear cost)."""
    stats = chain_statistics(*markov_chain_tables(q, T))
    return -demo_features + stats["feature_expectation"]


def two_step_solve(demos, config: ILConfig, vocab_size: int, c_init: LinearEnergy | None = None):
    """Alternate the exact soft-DP policy step and a cost ascent step.

    ``demos`` may be a DemoSet, a sequence batch, or an exact feature vector
    (infinite-data mode).  A cost step that would lower the exact demo
    log-likelihood is retried at half the step size.  Returns ``(c, q, history)``.
    """
    V, T = vocab_size, config.horizon
    target = _features(demos, V)
    c = c_init if c_init is not None else LinearEnergy(V)
    if not np.all(np.isfinite(c.params)):
        raise ValueError("initial costs must be finite")
    step = config.lr
    history = []
    dist = partition_dp(c, V, T)
    ll = float(-(c.params @ target) - dist.log_z)
    q = soft_dp_policy(c, V, T, dist)
    for rnd in range(config.max_rounds):
        g = cost_step_grad(q, target, T)
        gap = float(np.max(np.abs(g)))
        history.append({"round": rnd, "feature_gap": gap, "log_likelihood": ll, "step": step})
        if gap < config.tol:
            break
        for _ in range(config.max_halvings):
            cand = c.with_params(c.params + step * g)
            cand_dist = partition_dp(cand, V, T)
            cand_ll = float(-(cand.params @ target) - cand_dist.log_z)
            if np.isfinite(cand_ll) and cand_ll >= ll:
                break
            step *= 0.5
        else:
            break  # no ascent step left at float precision
        if not np.all(np.isfinite(cand.params)):
            raise FloatingPointError("non-finite costs in two-step solver")
        c, dist, ll = cand, cand_dist, cand_ll
        q = soft_dp_policy(c, V, T, dist)
    return c, q, history


@dataclass
class EquivalenceReport:
    margin: float
    regime: str
    step_discrepancy: float
    dropped_term: np.ndarray
    saturated_feature_mean: np.ndarray
    dropped_term_error: float
    fake_feature_mean: np.ndarray
    policy_discrepancy: float

    def ok(self, step_tol: float = 1e-12, policy_tol: float = 1e-10) -> bool:
        if self.dropped_term_error >= step_tol or self.policy_discrepancy >= policy_tol:
            return False
        return self.regime != "inactive" or self.step_discrepancy < step_tol


def gan_il_equivalence_check(gen: TabularGenerator, e: LinearEnergy, demos, m: float,
                             fake=None, rng: Rng | None = None, n_fake: int = 64
                             ) -> EquivalenceReport:
    """Compare the GAN updates against the imitation-learning updates exactly.

    Cost side: the discriminator descent direction ``-discriminator_grad`` is
    compared with the ascent gradient ``-E_real[f] + E_fake[f]``; their
    difference is exactly the feature mass of the fakes the hinge saturates
    (``D >= m``), divided by the fake batch size.  Policy side: the exact
    per-prefix score-function gradient with unit entropy weight is compared
    with the chain-DP gradient of ``E_q[c] - H(q)``.
    """
    if not isinstance(gen, TabularGenerator) or gen.order != 1:
        raise ValueError("equivalence check needs an order-1 tabular generator")
    if not isinstance(e, LinearEnergy):
        raise ValueError("equivalence check needs a linear energy")
    V = gen.vocab_size
    real = demos.seqs if isinstance(demos, DemoSet) else as_batch(demos, V)
    T = real.shape[1]
    if V ** T > ENUMERATION_LIMIT:
        raise InstanceTooLarge("equivalence check enumerates all sequences")
    if fake is None:
        fake = sample_batch(gen, n_fake, T, rng if rng is not None else make_rng(0))[0]
    fake = as_batch(fake, V)

    d_direction = -discriminator_grad(e, real, fake, m)
    c_direction = -feature_mean(real, V) + feature_mean(fake, V)
    dropped = c_direction - d_direction
    fake_e = e.energies(fake)
    saturated = fake_e >= m
    sat_mean = feature_counts_batch(fake[saturated], V).sum(axis=0) / fake.shape[0] \
        if saturated.any() else np.zeros(V + V * V)
    regime = "inactive" if not saturated.any() else ("saturated" if saturated.all() else "mixed")

    gan_grad = exact_generator_grad(gen, e, 1.0, T)
    il_grad = variational_grad(gen, e, T)
    return EquivalenceReport(
        margin=m,
        regime=regime,
        step_discrepancy=float(np.max(np.abs(dropped))),
        dropped_term=dropped,
        saturated_feature_mean=sat_mean,
        dropped_term_error=float(np.max(np.abs(dropped - sat_mean))),
        fake_feature_mean=feature_mean(fake, V),
        policy_discrepancy=float(np.max(np.abs(gan_grad - il_grad))),
    )
