"""Variance of multi-mix vs large-batch-mixup stochastic gradients.

Two routes are kept apart on purpose:

* closed forms assembled from the variance decomposition of the per-sample
  mixup gradient g(pair, lam) (:func:`decompose`, :func:`closed_form_multimix`);
* direct enumeration of every outcome the estimator can produce
  (:func:`enumerate_estimator`), which never uses the decomposition.

Exact mode replaces Beta(a, a) by a :class:`DiscreteWeightDist`. Pairs are ordered
pairs drawn uniformly with replacement (self-pairs included). Unless
``shared=False``, the K weights of a batch are drawn once and used by every pair
in that batch; this is the sampling scheme under which the closed form holds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations_with_replacement

import numpy as np
from scipy.optimize import brentq

from multimix.rand_dist import DiscreteWeightDist, Rng, sample_beta_array, sample_ordered_weights
from multimix.tinynet import Mlp, backward, forward_manifold_mix, per_sample_grads

MAX_EVALS = 10**7


class EnumerationBudgetError(RuntimeError):
    pass


def _fsum_weighted(w, x) -> float:
    return math.fsum(np.asarray(w, dtype=np.float64).ravel() * np.asarray(x).ravel())


@dataclass
class GradProblem:
    """A frozen network plus a dataset; the unit every variance computation is run against."""

    net: Mlp
    x: np.ndarray
    y: np.ndarray  # (n, C) label distributions
    s: int = 0  # mixing layer; 0 is input mixup
    l2: float = 0.0

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        self.y = np.atleast_2d(np.asarray(self.y, dtype=np.float64))
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError("x and y need the same number of rows")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def n_pairs(self) -> int:
        return self.n**2

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """All ordered pairs (i, j), pair index p = i * n + j."""
        i, j = np.divmod(np.arange(self.n_pairs), self.n)
        return i, j

    def grads(self, ia, ib, lam, s=None) -> np.ndarray:
        """(N, P) per-sample gradients of the mixup loss on pairs (ia[r], ib[r]) at weight lam[r]."""
        lam = np.asarray(lam, dtype=np.float64)
        s = self.s if s is None else s
        tr = forward_manifold_mix(self.net, self.x[ia], self.x[ib], s, lam)
        lam = np.broadcast_to(lam, (len(ia),))[:, None]
        labels = (1.0 - lam) * self.y[ia] + lam * self.y[ib]
        return per_sample_grads(self.net, tr, labels, self.l2)

    def mean_grad(self, ia, ib, lam, s=None) -> np.ndarray:
        """Average of :meth:`grads` over the rows, without materializing the (N, P) matrix."""
        lam = np.asarray(lam, dtype=np.float64)
        s = self.s if s is None else s
        tr = forward_manifold_mix(self.net, self.x[ia], self.x[ib], s, lam)
        lam = np.broadcast_to(lam, (len(ia),))[:, None]
        labels = (1.0 - lam) * self.y[ia] + lam * self.y[ib]
        return backward(self.net, tr, labels, self.l2)


@dataclass
class GradSample:
    estimator: str  # "multimix" or "largebatch"
    k: int
    b: int
    vector: np.ndarray
    sq_norm: float
    n_evals: int


def _make_sample(est, k, b, v, n_evals) -> GradSample:
    return GradSample(est, k, b, v, float(np.dot(v, v)), n_evals)


def grad_multimix(problem: GradProblem, ia, ib, weights, s=None) -> GradSample:
    """g~ = (1/KB) sum over pairs and k of g(pair, lam_k).

    ``weights`` is (K,) to share one sequence across the batch, or (B, K) for
    an independent sequence per pair.
    """
    ia, ib = np.asarray(ia), np.asarray(ib)
    if ia.size == 0:
        raise ValueError("empty batch")
    w = np.asarray(weights, dtype=np.float64)
    b = ia.size
    if w.ndim == 1:
        w = np.broadcast_to(w, (b, w.size))
    if w.shape[0] != b or w.shape[1] == 0:
        raise ValueError(f"weights of shape {w.shape} do not fit a batch of {b}")
    k = w.shape[1]
    v = problem.mean_grad(np.repeat(ia, k), np.repeat(ib, k), w.ravel(), s)
    return _make_sample("multimix", k, b, v, k * b)


def grad_largebatch_mixup(problem: GradProblem, ia, ib, lam: float, k: int = 1, s=None) -> GradSample:
    """g~' = (1/KB) sum over the K*B pairs of g(pair, lam) with a single shared lam."""
    ia, ib = np.asarray(ia), np.asarray(ib)
    if ia.size == 0:
        raise ValueError("empty batch")
    if ia.size % k:
        raise ValueError(f"batch of {ia.size} pairs is not K*B for K={k}")
    v = problem.mean_grad(ia, ib, np.full(ia.size, float(lam)), s)
    return _make_sample("largebatch", k, ia.size // k, v, ia.size)


# ---------------------------------------------------------------- exact mode


def grad_table(problem: GradProblem, dist: DiscreteWeightDist) -> np.ndarray:
    """G[p, a] = g(pair p, atom a), shape (n^2, A, P)."""
    n_evals = problem.n_pairs * len(dist)
    if n_evals > MAX_EVALS:
        raise EnumerationBudgetError(
            f"grad table needs {n_evals} gradient evaluations, budget is {MAX_EVALS}")
    i, j = problem.pairs()
    a = len(dist)
    g = problem.grads(np.repeat(i, a), np.repeat(j, a), np.tile(dist.values, i.size))
    return g.reshape(problem.n_pairs, a, -1)


def pair_probs(n_pairs: int) -> np.ndarray:
    return np.full(n_pairs, 1.0 / n_pairs)


@dataclass
class Decomposition:
    mean: np.ndarray  # E g = grad of the mixup loss
    var_g: float  # Var[g]
    e_pair_var_lam: float  # E_pair Var_lam[g]
    var_pair_g1: float  # Var_pair[g1], g1(pair) = E_lam g
    e_lam_var_pair: float  # E_lam Var_pair[g]
    var_lam_g2: float  # Var_lam[g2], g2(lam) = E_pair g
    residual_pair: float = field(init=False)
    residual_lam: float = field(init=False)

    def __post_init__(self):
        self.residual_pair = self.var_g - (self.e_pair_var_lam + self.var_pair_g1)
        self.residual_lam = self.var_g - (self.e_lam_var_pair + self.var_lam_g2)

    @property
    def b0(self) -> float:
        """Batch size above which multi-mix has no larger variance than large-batch mixup."""
        if self.var_lam_g2 == 0:
            return 0.0 if self.var_pair_g1 == 0 else math.inf
        return self.var_pair_g1 / self.var_lam_g2


def decompose(table: np.ndarray, probs_pair: np.ndarray, probs_lam: np.ndarray) -> Decomposition:
    wp = np.asarray(probs_pair)[:, None]
    wl = np.asarray(probs_lam)[None, :]
    joint = wp * wl
    mean = np.einsum("pa,pad->d", joint, table)
    g1 = np.einsum("a,pad->pd", probs_lam, table)
    g2 = np.einsum("p,pad->ad", probs_pair, table)

    def sq(d):
        return np.einsum("...d,...d->...", d, d)

    return Decomposition(
        mean=mean,
        var_g=_fsum_weighted(joint, sq(table - mean)),
        e_pair_var_lam=_fsum_weighted(joint, sq(table - g1[:, None, :])),
        var_pair_g1=_fsum_weighted(probs_pair, sq(g1 - mean)),
        e_lam_var_pair=_fsum_weighted(joint, sq(table - g2[None, :, :])),
        var_lam_g2=_fsum_weighted(probs_lam, sq(g2 - mean)),
    )


def closed_form_multimix(d: Decomposition, k: int, b: int, shared: bool = True) -> float:
    """Var[g~] from the decomposition.

    shared: (1/K)((1/B)Var[g] + ((B-1)/B)Var_lam[g2]) + (1 - 1/K)(1/B)Var_pair[g1]
    per-pair weights: the cross-pair term vanishes, leaving (1/B)((1/K)Var[g] + (1 - 1/K)Var_pair[g1]).
    """
    cross = (b - 1) / b * d.var_lam_g2 if shared else 0.0
    return (d.var_g / b + cross) / k + (1 - 1 / k) * d.var_pair_g1 / b


def closed_form_largebatch(d: Decomposition, k: int, b: int) -> float:
    """Var[g~'] = (1/KB)(Var[g] + (KB - 1) Var_lam[g2])."""
    kb = k * b
    return (d.var_g + (kb - 1) * d.var_lam_g2) / kb


def _multisets(n_items: int, size: int, probs: np.ndarray):
    """All size-multisets over range(n_items): (count matrix / size, multinomial probabilities)."""
    combos = list(combinations_with_replacement(range(n_items), size))
    counts = np.zeros((len(combos), n_items))
    for r, c in enumerate(combos):
        np.add.at(counts[r], list(c), 1)
    logp = (math.lgamma(size + 1) - np.sum([[math.lgamma(x + 1) for x in row] for row in counts], axis=1)
            + counts @ np.log(np.where(probs > 0, probs, 1.0)))
    p = np.exp(logp)
    p[(counts[:, probs == 0] > 0).any(axis=1)] = 0.0
    return counts / size, p


def _n_multisets(n_items, size):
    return math.comb(n_items + size - 1, size)


@dataclass
class EnumResult:
    mean: np.ndarray
    var: float
    n_outcomes: int


def enumerate_estimator(table: np.ndarray, probs_pair, probs_lam, k: int, b: int,
                        estimator: str = "multimix", shared: bool = True) -> EnumResult:
    """Exact mean and E||g~ - E g~||^2 by listing every estimator outcome.

    Outcomes are grouped into multisets of pairs / weights (the estimator is a
    symmetric average) and weighted by their multinomial probability; sorting
    the weights does not change the average, so "i.i.d. then sort" gives the
    same outcome law.
    """
    probs_pair = np.asarray(probs_pair, dtype=np.float64)
    probs_lam = np.asarray(probs_lam, dtype=np.float64)
    n_pairs, n_atoms, _ = table.shape
    if estimator == "largebatch":
        k, b, shared = 1, k * b, True
    elif estimator != "multimix":
        raise ValueError(f"unknown estimator {estimator!r}")

    if shared:
        n_out = _n_multisets(n_atoms, k) * _n_multisets(n_pairs, b)
    else:
        n_out = _n_multisets(n_pairs * _n_multisets(n_atoms, k), b)
    if n_out > MAX_EVALS:
        raise EnumerationBudgetError(f"{n_out} estimator outcomes exceed the budget of {MAX_EVALS}")

    lam_frac, lam_p = _multisets(n_atoms, k, probs_lam)
    # h[m, p] = (1/K) sum_k g(p, lam_k) for weight multiset m
    h = np.einsum("ma,pad->mpd", lam_frac, table)
    outcomes, probs = [], []
    if shared:
        pair_frac, pair_p = _multisets(n_pairs, b, probs_pair)
        for m in range(len(lam_p)):
            outcomes.append(pair_frac @ h[m])
            probs.append(lam_p[m] * pair_p)
    else:
        # one "unit" per (weight multiset, pair); the batch is a multiset of B i.i.d. units
        units = h.reshape(-1, h.shape[-1])
        unit_p = np.outer(lam_p, probs_pair).ravel()
        unit_frac, unit_mp = _multisets(units.shape[0], b, unit_p)
        outcomes.append(unit_frac @ units)
        probs.append(unit_mp)
    outcomes = np.concatenate(outcomes)
    probs = np.concatenate(probs)
    mean = np.array([math.fsum(probs * outcomes[:, j]) for j in range(outcomes.shape[1])])
    dev = outcomes - mean
    var = _fsum_weighted(probs, np.einsum("od,od->o", dev, dev))
    return EnumResult(mean, var, outcomes.shape[0])


@dataclass
class ExactVariance:
    estimator: str
    k: int
    b: int
    closed_form: float
    enumerated: float | None

    @property
    def gap(self) -> float:
        return math.nan if self.enumerated is None else abs(self.closed_form - self.enumerated)


def exact_variance(problem: GradProblem, dist: DiscreteWeightDist, k: int, b: int,
                   estimator: str = "multimix", shared: bool = True,
                   cross_check: bool = True, table=None) -> ExactVariance:
    if table is None:
        table = grad_table(problem, dist)
    d = decompose(table, pair_probs(problem.n_pairs), dist.probs)
    if estimator == "multimix":
        cf = closed_form_multimix(d, k, b, shared)
    elif estimator == "largebatch":
        cf = closed_form_largebatch(d, k, b)
    else:
        raise ValueError(f"unknown estimator {estimator!r}")
    en = None
    if cross_check:
        en = enumerate_estimator(table, pair_probs(problem.n_pairs), dist.probs, k, b,
                                 estimator, shared).var
    return ExactVariance(estimator, k, b, cf, en)


# ------------------------------------------------------- canonical problems


def canonical_problem(seed: int = 0) -> tuple[GradProblem, DiscreteWeightDist]:
    """4 points in 2-D, 2 classes, a fixed logistic-regression snapshot, 3 Beta(1,1) atoms."""
    x = np.array([[1.0, 0.5], [-0.5, 1.5], [-1.0, -1.0], [1.5, -0.5]])
    y = np.eye(2)[[0, 0, 1, 1]]
    net = Mlp([np.array([[0.3, -0.2], [-0.4, 0.5]])], [np.array([0.1, -0.1])])
    from multimix.rand_dist import discretize_beta
    return GradProblem(net, x, y), discretize_beta(1.0, 3)


def random_tiny_problem(rng: Rng, n_max=6, n_atoms=3, hidden=True):
    """Random tiny problem: 3..n_max points, 2-3 classes, logistic or one hidden layer."""
    from multimix.rand_dist import discretize_beta
    from multimix.tinynet import init_mlp

    n = int(rng.integers(3, n_max + 1))
    c = int(rng.integers(2, 4))
    widths = [2, int(rng.integers(2, 5)), c] if hidden and rng.uniform() < 0.5 else [2, c]
    net = init_mlp(widths, rng)
    for bias in net.biases:
        bias[:] = rng.normal(0, 0.5, bias.shape)
    x = rng.normal(0, 1.5, (n, 2))
    y = np.eye(c)[rng.integers(0, c, n)]
    s = int(rng.integers(0, net.n_layers))
    alpha = float(rng.uniform(0.3, 3.0))
    return GradProblem(net, x, y, s=s), discretize_beta(alpha, n_atoms)


def spread_dist(delta: float) -> DiscreteWeightDist:
    """Three equiprobable atoms at 1/2 - delta, 1/2, 1/2 + delta."""
    return DiscreteWeightDist(np.array([0.5 - delta, 0.5, 0.5 + delta]), np.full(3, 1 / 3))


def symmetric_problem(scale: float) -> GradProblem:
    """Two mirror-image points (+-scale, 0) of different classes under a mirror-symmetric logistic model."""
    net = Mlp([np.array([[1.0, 0.0], [-1.0, 0.0]])], [np.zeros(2)])
    return GradProblem(net, np.array([[scale, 0.0], [-scale, 0.0]]), np.eye(2))


def engineered_problem(target_b0: float = 3.0, delta: float = 0.3):
    """Symmetric two-point problem whose data scale is tuned so that B0 == ``target_b0``.

    With atoms at 1/2 -+ 0.3, B0 falls from about 3.98 at scale 2 to about 2.02
    at scale 4, so any target in between is bracketed.
    """
    dist = spread_dist(delta)

    def f(scale):
        p = symmetric_problem(scale)
        d = decompose(grad_table(p, dist), pair_probs(p.n_pairs), dist.probs)
        return d.var_pair_g1 - target_b0 * d.var_lam_g2

    scale = brentq(f, 2.0, 4.0, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
    return symmetric_problem(scale), dist


# -------------------------------------------------------- variance comparisons


@dataclass
class KMonotoneReport:
    ks: list[int]
    variances: list[float]
    enumerated: list[float | None]
    k_term: float  # coefficient of 1/K in the closed form
    monotone: bool
    strict: bool

    @property
    def ok(self) -> bool:
        return self.strict if self.k_term > 0 else self.monotone


def check_k_monotone(problem: GradProblem, dist: DiscreteWeightDist, ks, b: int = 1,
                       cross_check: bool = True, tol: float = 1e-12) -> KMonotoneReport:
    ks = list(ks)
    if any(k2 <= k1 for k1, k2 in zip(ks, ks[1:])):
        raise ValueError("K list must be strictly increasing")
    table = grad_table(problem, dist)
    d = decompose(table, pair_probs(problem.n_pairs), dist.probs)
    var, enum = [], []
    for k in ks:
        ev = exact_variance(problem, dist, k, b, cross_check=cross_check, table=table)
        var.append(ev.closed_form)
        enum.append(ev.enumerated)
    k_term = d.var_g / b + (b - 1) / b * d.var_lam_g2 - d.var_pair_g1 / b
    diffs = np.diff(var)
    return KMonotoneReport(ks, var, enum, k_term,
                       monotone=bool(np.all(diffs <= tol)),
                       strict=bool(np.all(diffs < -tol)))


@dataclass
class ThresholdRow:
    b: int
    var_multimix: float
    var_largebatch: float
    multimix_le: bool
    expected_le: bool

    @property
    def consistent(self) -> bool:
        return self.multimix_le == self.expected_le


@dataclass
class ThresholdReport:
    k: int
    b0: float
    var_pair_g1: float
    var_lam_g2: float
    rows: list[ThresholdRow]
    note: str = ""

    @property
    def ok(self) -> bool:
        return all(r.consistent for r in self.rows)


def check_batch_threshold(problem: GradProblem, dist: DiscreteWeightDist, k: int, bs,
                       tol: float = 1e-10) -> ThresholdReport:
    """Compare Var[g~] and Var[g~'] for each B against the threshold B >= B0.

    Differences within ``tol`` count as equality, so B exactly at B0 reads as "<=".
    """
    if k <= 1:
        raise ValueError("K must be > 1")
    table = grad_table(problem, dist)
    d = decompose(table, pair_probs(problem.n_pairs), dist.probs)
    note = ""
    if d.var_lam_g2 == 0:
        # Var[g~] - Var[g~'] = (K-1)/(KB) * Var_pair[g1] >= 0: no finite threshold
        note = "Var_lam[g2] = 0: threshold undefined; multi-mix is <= only if Var_pair[g1] = 0"
    rows = []
    for b in bs:
        vm = closed_form_multimix(d, k, b)
        vl = closed_form_largebatch(d, k, b)
        expected = d.var_pair_g1 <= tol if d.var_lam_g2 == 0 else b >= d.b0 - tol
        rows.append(ThresholdRow(b, vm, vl, vm <= vl + tol, expected))
    return ThresholdReport(k, d.b0, d.var_pair_g1, d.var_lam_g2, rows, note)


# ------------------------------------------------------------ Monte Carlo


@dataclass
class SamplerConfig:
    """How one stochastic gradient is drawn for Monte Carlo estimates."""

    problem: GradProblem
    k: int = 1
    b: int = 1
    estimator: str = "multimix"
    alpha: float = 1.0
    dist: DiscreteWeightDist | None = None  # overrides Beta(alpha, alpha) when set
    layers: tuple[int, ...] | None = None  # mixing layer drawn per batch; None -> problem.s
    shared: bool = True
    pairing: str = "uniform"  # "uniform": i.i.d. ordered pairs; "permute": batch vs its permutation

    def _weights(self, rng, size):
        if self.dist is not None:
            return self.dist.sample(rng, size)
        return sample_beta_array(rng, self.alpha, size)

    def draw(self, rng: Rng) -> GradSample:
        p = self.problem
        n_pairs = self.b if self.estimator == "multimix" else self.k * self.b
        if self.pairing == "permute":
            ia = rng.gen.choice(p.n, size=n_pairs, replace=n_pairs > p.n)
            ib = ia[rng.permutation(n_pairs)]
        else:
            ia = rng.integers(0, p.n, n_pairs)
            ib = rng.integers(0, p.n, n_pairs)
        s = None if self.layers is None else int(self.layers[rng.integers(0, len(self.layers))])
        if self.estimator == "largebatch":
            return grad_largebatch_mixup(p, ia, ib, self._weights(rng, 1)[0], self.k, s)
        if self.shared:
            w = np.sort(self._weights(rng, self.k)) if self.dist is not None else \
                sample_ordered_weights(rng, self.alpha, self.k)
        else:
            w = np.sort(self._weights(rng, self.b * self.k).reshape(self.b, self.k), axis=1)
        return grad_multimix(p, ia, ib, w, s)


@dataclass
class VarianceReport:
    estimator: str
    k: int
    b: int
    var: float
    ci_lo: float
    ci_hi: float
    replicates: int
    exact: float | None = None


@dataclass
class MeanReport:
    """Monte Carlo mean of a per-replicate scalar with a percentile bootstrap CI."""

    mean: float
    ci_lo: float
    ci_hi: float
    replicates: int


def draw_replicates(config: SamplerConfig, replicates: int, rng: Rng) -> np.ndarray:
    return np.stack([config.draw(rng.substream(r)).vector for r in range(replicates)])


def _boot_counts(rng: Rng, r: int, n_boot: int) -> np.ndarray:
    return rng.gen.multinomial(r, np.full(r, 1.0 / r), size=n_boot).astype(np.float64)


def variance_stat(vectors: np.ndarray) -> float:
    r = vectors.shape[0]
    dev = vectors - vectors.mean(axis=0)
    return math.fsum(np.einsum("rd,rd->r", dev, dev)) / (r - 1)


def bootstrap_variance_ci(vectors, rng: Rng, n_boot=1000, level=0.95):
    r = vectors.shape[0]
    c = _boot_counts(rng, r, n_boot)
    means = c @ vectors / r
    sumsq = c @ np.einsum("rd,rd->r", vectors, vectors)
    stats = (sumsq - r * np.einsum("bd,bd->b", means, means)) / (r - 1)
    q = (1 - level) / 2
    return float(np.quantile(stats, q)), float(np.quantile(stats, 1 - q))


def bootstrap_mean_ci(values, rng: Rng, n_boot=1000, level=0.95):
    values = np.asarray(values, dtype=np.float64)
    r = values.size
    stats = _boot_counts(rng, r, n_boot) @ values / r
    q = (1 - level) / 2
    return float(np.quantile(stats, q)), float(np.quantile(stats, 1 - q))


def estimate_variance(config: SamplerConfig, replicates: int, rng: Rng,
                      n_boot: int = 1000) -> VarianceReport:
    if replicates < 2:
        raise ValueError("need at least 2 replicates")
    vecs = draw_replicates(config, replicates, rng.substream(0))
    var = variance_stat(vecs)
    lo, hi = bootstrap_variance_ci(vecs, rng.substream(1), n_boot)
    # percentile intervals of a skewed statistic can miss the point estimate
    lo, hi = min(lo, var), max(hi, var)
    return VarianceReport(config.estimator, config.k, config.b, max(var, 0.0), max(lo, 0.0), hi,
                          replicates)


def estimate_sq_norm(config: SamplerConfig, replicates: int, rng: Rng, n_boot: int = 1000) -> MeanReport:
    """Monte Carlo E||g~||^2, the variance surrogate (E g~ does not depend on K)."""
    vecs = draw_replicates(config, replicates, rng.substream(0))
    sq = np.einsum("rd,rd->r", vecs, vecs)
    lo, hi = bootstrap_mean_ci(sq, rng.substream(1), n_boot)
    return MeanReport(float(sq.mean()), lo, hi, replicates)
