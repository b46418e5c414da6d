"""Energy-based sequence GAN training.

The discriminator is an energy ``D`` trained by descent on

    mean_real D(S) + mean_fake max(m - D(S), 0)

and the generator ``p_G`` by descent on ``E_{p_G}[D(S) + lam * log p_G(S)]``
(energy plus ``lam`` times negative entropy).  The generator gradient is the
score-function form

    sum_t E[ grad log p_G(s_t | s_<t) * (Q(s_1..s_t) - b) ],
    Q(s_1..s_t) = E[D(S) + lam * log p_G(S) | s_1..s_t],

with ``Q`` estimated from Monte-Carlo rollouts of the generator (exact at
``t == T``) and ``b`` an optional moving-average baseline.  Both players take
plain gradient steps.
"""
from __future__ import annotations

import collections
import logging
from dataclasses import dataclass, field

import numpy as np

from .numerics import Rng, derive_rng, log_softmax_rows
from .seq_models import (EnergyModel, Generator, LinearEnergy, TabularGenerator, as_batch, feature_mean,
                         sample_batch)

log = logging.getLogger(__name__)


@dataclass
class GanConfig:
    margin: float = 1.0
    lambda_entropy: float = 1.0
    lr_g: float = 0.1
    lr_d: float = 0.05
    batch_size: int = 32
    n_rollouts: int = 16
    d_steps: int = 1
    g_steps: int = 1
    epochs: int = 200
    horizon: int = 8
    baseline_enabled: bool = True
    baseline_window: int = 100
    pretrain_epochs: int = 5
    lr_pretrain: float = 1.0
    energy_warm_start: bool = True
    early_stop: bool = False
    early_stop_patience: int = 20
    early_stop_min_delta: float = 1e-3
    oracle_eval_samples: int = 2000
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not np.isfinite(self.margin):
            raise ValueError("margin must be finite")
        if self.lambda_entropy < 0:
            raise ValueError("lambda_entropy must be >= 0")
        if self.n_rollouts < 1:
            raise ValueError("n_rollouts must be >= 1")
        if self.lr_g < 0 or self.lr_d < 0 or self.lr_pretrain < 0:
            # zero is allowed: it freezes a player
            raise ValueError("learning rates must be non-negative")
        for name in ("batch_size", "horizon", "baseline_window"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("d_steps", "g_steps", "epochs", "pretrain_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


METRIC_FIELDS = ("iteration", "d_loss", "g_objective", "mean_fake_energy", "mean_real_energy",
                 "entropy_estimate", "oracle_nll", "feature_gap")


@dataclass
class TrainState:
    gen: Generator
    energy: EnergyModel
    iteration: int = 0
    history: list[dict] = field(default_factory=list)
    pretrain_nll: list[float] = field(default_factory=list)
    initial_oracle_nll: float | None = None
    pretrained_oracle_nll: float | None = None


@dataclass(frozen=True)
class QEstimate:
    value: float
    n_rollouts: int


class MovingBaseline:
    """Mean of the most recent ``window`` Q estimates (0 until any are seen)."""

    def __init__(self, window: int = 100):
        self.values = collections.deque(maxlen=window)

    @property
    def value(self) -> float:
        return float(np.mean(self.values)) if self.values else 0.0

    def update(self, qs):
        self.values.extend(np.asarray(qs, dtype=np.float64).ravel().tolist())


def hinge(m: float, d) -> float:
    return np.maximum(m - d, 0.0)


def discriminator_loss(e: EnergyModel, real, fake, m: float) -> float:
    return float(e.energies(real).mean() + hinge(m, e.energies(fake)).mean())


def discriminator_grad(e: EnergyModel, real, fake, m: float) -> np.ndarray:
    """Gradient of the hinge-margin discriminator loss.

    Fakes with ``D >= m`` sit on the flat side of the hinge and contribute
    nothing, ties included.
    """
    real = as_batch(real, e.vocab_size)
    fake = as_batch(fake, e.vocab_size)
    if real.shape[0] == 0 or fake.shape[0] == 0:
        raise ValueError("real and fake batches must be non-empty")
    active = (e.energies(fake) < m).astype(np.float64)
    g = e.grad_weighted(real, np.full(real.shape[0], 1.0 / real.shape[0]))
    if active.any():
        g = g - e.grad_weighted(fake, active / fake.shape[0])
    return g


def sequence_objective(gen: Generator, e: EnergyModel, seqs, lam: float,
                       logp: np.ndarray | None = None) -> np.ndarray:
    """``D(S) + lam * log p_G(S)`` per row."""
    if logp is None:
        logp = gen.log_probs(seqs)
    return e.energies(seqs) + lam * logp.sum(axis=1)


def rollout_q(gen: Generator, e: EnergyModel, seqs: np.ndarray, n_rollouts: int, lam: float,
              rng: Rng) -> np.ndarray:
    """Q estimates for every prefix of every row, shape ``(B, T)``.

    Column ``t`` uses ``n_rollouts`` completions of ``seqs[:, :t+1]``; the last
    column is the exact objective of the row itself.
    """
    B, T = seqs.shape
    q = np.empty((B, T))
    q[:, -1] = sequence_objective(gen, e, seqs, lam)
    for t in range(1, T):
        prefixes = np.repeat(seqs[:, :t], n_rollouts, axis=0)
        done, logp = gen.complete(prefixes, T, rng)
        vals = sequence_objective(gen, e, done, lam, logp)
        q[:, t - 1] = vals.reshape(B, n_rollouts).mean(axis=1)
    return q


def estimate_Q(gen: Generator, e: EnergyModel, prefix, n_rollouts: int, lam: float,
               rng: Rng, T: int) -> QEstimate:
    prefix = as_batch(prefix, gen.vocab_size)
    L = prefix.shape[1]
    if not 1 <= L <= T:
        raise ValueError(f"prefix length {L} outside [1, {T}]")
    if L == T:
        return QEstimate(float(sequence_objective(gen, e, prefix, lam)[0]), 0)
    done, logp = gen.complete(np.repeat(prefix, n_rollouts, axis=0), T, rng)
    return QEstimate(float(sequence_objective(gen, e, done, lam, logp).mean()), n_rollouts)


def generator_grad(gen: Generator, e: EnergyModel, config: GanConfig, rng: Rng,
                   baseline: MovingBaseline | None = None, return_batch: bool = False):
    """Score-function estimate of the gradient of ``E[D + lam * log p_G]``.

    Averaged over ``config.batch_size`` sampled sequences.  With a baseline,
    its value from before this batch is subtracted from every Q and the
    batch's Q values are then pushed into it.
    """
    T = config.horizon
    seqs, _ = sample_batch(gen, config.batch_size, T, rng)
    q = rollout_q(gen, e, seqs, config.n_rollouts, config.lambda_entropy, rng)
    b = 0.0
    if config.baseline_enabled and baseline is not None:
        b = baseline.value
        baseline.update(q)
    g = gen.grad_weighted(seqs, (q - b) / config.batch_size)
    if return_batch:
        return g, seqs, q
    return g


# ---------------------------------------------------------------------------
# exact quantities by enumeration (small V, T)


def all_sequences(V: int, T: int) -> np.ndarray:
    """Every length-``T`` sequence over ``V`` items, lexicographic, shape ``(V**T, T)``."""
    if V ** T > 10 ** 6:
        raise ValueError(f"V**T = {V ** T} is too large to enumerate")
    grids = np.indices((V,) * T).reshape(T, -1).T
    return grids.astype(np.int64)


def exact_generator_grad(gen: Generator, e: EnergyModel, lam: float, T: int,
                         baseline: float = 0.0) -> np.ndarray:
    """Exact expectation of :func:`generator_grad` (per-prefix Q form)."""
    seqs = all_sequences(gen.vocab_size, T)
    step_lp = gen.log_probs(seqs)
    p = np.exp(step_lp.sum(axis=1))
    f = sequence_objective(gen, e, seqs, lam, step_lp)
    q = np.empty((seqs.shape[0], T))
    for t in range(T):
        # conditional mean of f over completions of each length-(t+1) prefix
        keys = np.ravel_multi_index(seqs[:, :t + 1].T, (gen.vocab_size,) * (t + 1))
        num = np.bincount(keys, weights=p * f)
        den = np.bincount(keys, weights=p)
        q[:, t] = num[keys] / den[keys]
    return gen.grad_weighted(seqs, p[:, None] * (q - baseline))


def exact_objective(gen: Generator, e: EnergyModel, lam: float, T: int) -> float:
    seqs = all_sequences(gen.vocab_size, T)
    lp = gen.log_probs(seqs).sum(axis=1)
    return float(np.sum(np.exp(lp) * (e.energies(seqs) + lam * lp)))


# ---------------------------------------------------------------------------
# pretraining and the adversarial loop


def mean_nll(gen: Generator, demos) -> float:
    return float(-gen.log_probs(demos).sum(axis=1).mean())


def pretrain_mle(gen: Generator, demos, epochs: int, lr: float,
                 history: list | None = None) -> Generator:
    """Full-batch gradient ascent on the mean demo log-likelihood.

    A step that would raise the NLL is retried at half the step size (down to
    ``lr * 2**-30``, after which the epoch is skipped), so the reported NLL
    never increases.  Per-epoch NLLs are appended to ``history`` if given.
    """
    demos = as_batch(demos, gen.vocab_size)
    if demos.shape[0] == 0:
        raise ValueError("pretraining needs at least one demonstration")
    nll = mean_nll(gen, demos)
    for _ in range(epochs):
        g = gen.grad_weighted(demos, 1.0 / demos.shape[0])
        step = lr
        for _ in range(31):
            cand = gen.with_params(gen.params + step * g)
            cand_nll = mean_nll(cand, demos)
            if cand_nll <= nll:
                gen, nll = cand, cand_nll
                break
            step *= 0.5
        if history is not None:
            history.append(nll)
    return gen


def warm_start_energy(e: EnergyModel, gen: Generator, T: int) -> EnergyModel:
    """Set a linear energy to ``-log p_G`` of a homogeneous order-1 generator.

    The generator is then already the exact minimizer of its entropy-regularized
    objective for this energy, so adversarial rounds start from the
    generator's own fixed point instead of being pulled toward uniform.  The
    initial costs are shifted so the most expensive length-``T`` sequence has
    energy 0, keeping every fake below any positive margin at the start.
    Other model combinations are returned unchanged.
    """
    if not (isinstance(e, LinearEnergy) and isinstance(gen, TabularGenerator)
            and gen.order == 1 and not gen.time_indexed):
        return e
    init, trans = gen.tables()
    c0 = -log_softmax_rows(init)[0]
    C = -log_softmax_rows(trans)
    worst = np.zeros(gen.vocab_size)  # max cost-to-go from each item
    for _ in range(T - 1):
        worst = (C + worst[None, :]).max(axis=1)
    c0 = c0 - (c0 + worst).max()
    return e.with_params(np.concatenate([c0, C.ravel()]))


def _check_finite(**terms):
    for name, value in terms.items():
        if value is not None and not np.all(np.isfinite(value)):
            raise FloatingPointError(f"non-finite {name} during training")


def train(gen: Generator, e: EnergyModel, demos, config: GanConfig, oracle=None,
          evaluate=None) -> TrainState:
    """Run pretraining and ``config.epochs`` rounds of discriminator/generator updates.

    ``evaluate(gen, state)`` may supply ``oracle_nll`` for each metric row; by
    default it is derived from ``oracle`` via :mod:`ebseqgan.evaluation`.
    """
    from . import evaluation  # circular at module level

    demos = as_batch(demos, gen.vocab_size)
    if demos.shape[0] == 0:
        raise ValueError("training needs at least one demonstration")
    T = config.horizon
    if demos.shape[1] != T:
        raise ValueError(f"demos have length {demos.shape[1]}, config horizon is {T}")
    V = gen.vocab_size
    rng_data = derive_rng(config.seed, "real-batches")
    rng_fake = derive_rng(config.seed, "fake-batches")
    rng_g = derive_rng(config.seed, "generator-grad")
    demo_features = feature_mean(demos, V)

    def oracle_nll(g):
        if oracle is None:
            return None
        return evaluation.oracle_nll(g, oracle, T, direction="forward",
                                     n=config.oracle_eval_samples,
                                     rng=derive_rng(config.seed, "oracle-eval"))

    state = TrainState(gen=gen, energy=e)
    state.initial_oracle_nll = oracle_nll(gen)
    if config.pretrain_epochs:
        gen = pretrain_mle(gen, demos, config.pretrain_epochs, config.lr_pretrain,
                           history=state.pretrain_nll)
        state.gen = gen
    state.pretrained_oracle_nll = oracle_nll(gen)
    if config.energy_warm_start:
        e = warm_start_energy(e, gen, T)
        state.energy = e

    baseline = MovingBaseline(config.baseline_window)
    best_gap, stale = np.inf, 0
    for _ in range(config.epochs):
        d_loss = None
        real = fake = None
        for _ in range(config.d_steps):
            real = demos[rng_data.integers(0, demos.shape[0], config.batch_size)]
            fake, _ = sample_batch(gen, config.batch_size, T, rng_fake)
            d_loss = discriminator_loss(e, real, fake, config.margin)
            _check_finite(d_loss=d_loss)
            e = e.with_params(e.params - config.lr_d * discriminator_grad(e, real, fake, config.margin))
        g_obj = fake_seqs = None
        for _ in range(config.g_steps):
            g, fake_seqs, q = generator_grad(gen, e, config, rng_g, baseline, return_batch=True)
            g_obj = float(q[:, -1].mean())
            _check_finite(g_objective=g_obj, generator_gradient=g)
            gen = gen.with_params(gen.params - config.lr_g * g)
        _check_finite(energy_parameters=e.params, generator_parameters=gen.params)

        if fake_seqs is None:
            fake_seqs = fake if fake is not None else sample_batch(gen, config.batch_size, T, rng_fake)[0]
        if real is None:
            real = demos[:config.batch_size]
        gap = evaluation.feature_gap(gen if isinstance(gen, TabularGenerator) and gen.order == 1
                                     else fake_seqs, demo_features, V=V, T=T)
        state.iteration += 1
        state.gen, state.energy = gen, e
        state.history.append(evaluation.metric_row(
            iteration=state.iteration,
            d_loss=d_loss,
            g_objective=g_obj,
            mean_fake_energy=float(e.energies(fake_seqs).mean()),
            mean_real_energy=float(e.energies(real).mean()),
            entropy_estimate=float(-gen.log_probs(fake_seqs).sum(axis=1).mean()),
            oracle_nll=evaluate(gen, state) if evaluate else oracle_nll(gen),
            feature_gap=gap,
        ))
        if config.early_stop:
            if gap < best_gap - config.early_stop_min_delta:
                best_gap, stale = gap, 0
            else:
                stale += 1
                if stale >= config.early_stop_patience:
                    log.info("early stop at round %d (feature gap %.4g)", state.iteration, gap)
                    break
    return state
