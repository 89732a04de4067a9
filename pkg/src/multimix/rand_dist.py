"""Seedable randomness: Beta(a, a) draws, ordered mixing weights, discretized Beta."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import betainc

_EPS = np.finfo(np.float64).eps


class Rng:
    """Deterministic random stream keyed by a 64-bit seed and an optional substream path.

    The bit stream comes from numpy's PCG64, which is reproducible across
    platforms for a fixed (seed, spawn_key). Gamma and Beta draws are done
    here, not by numpy, so the transform stays under our control.
    """

    def __init__(self, seed: int = 0, stream: tuple[int, ...] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def substream(self, *ids: int) -> "Rng":
        """Independent child stream, e.g. ``rng.substream(epoch, batch)``. Pure in (seed, ids)."""
        return Rng(self.seed, self.stream + tuple(ids))

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.stream})"

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def binomial(self, n, p, size=None):
        return self.gen.binomial(n, p, size)

    def log_gamma(self, shape: float, size: int) -> np.ndarray:
        """log of Gamma(shape, 1) draws (Marsaglia-Tsang, with the U**(1/a) boost for a < 1).

        Working in log space keeps tiny shapes (a ~ 0.05) from underflowing to 0.
        """
        if shape <= 0:
            raise ValueError(f"gamma shape must be positive, got {shape}")
        boost = shape < 1.0
        a = shape + 1.0 if boost else shape
        d = a - 1.0 / 3.0
        c = 1.0 / np.sqrt(9.0 * d)
        out = np.empty(size)
        todo = np.arange(size)
        while todo.size:
            m = todo.size
            x = self.gen.standard_normal(m)
            u = self.gen.random(m)
            v = (1.0 + c * x) ** 3
            ok = v > 0
            logv = np.log(np.where(ok, v, 1.0))
            squeeze = u < 1.0 - 0.0331 * x**4
            with np.errstate(divide="ignore"):
                full = np.log(u) < 0.5 * x**2 + d * (1.0 - v + logv)
            accept = ok & (squeeze | full)
            out[todo[accept]] = np.log(d) + logv[accept]
            todo = todo[~accept]
        if boost:
            u = self.gen.random(size)
            # 1 - U lies in (0, 1]; avoids log(0)
            out += np.log1p(-u) / shape
        return out


def _check_alpha(alpha):
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")


def sample_beta_array(rng: Rng, alpha: float, size: int) -> np.ndarray:
    """``size`` Beta(alpha, alpha) draws, each strictly inside (0, 1)."""
    _check_alpha(alpha)
    g1 = rng.log_gamma(alpha, size)
    g2 = rng.log_gamma(alpha, size)
    # G1 / (G1 + G2) = 1 / (1 + exp(log G2 - log G1))
    with np.errstate(over="ignore"):
        lam = 1.0 / (1.0 + np.exp(g2 - g1))
    return np.clip(lam, _EPS, 1.0 - _EPS)


def sample_beta(rng: Rng, alpha: float) -> float:
    return float(sample_beta_array(rng, alpha, 1)[0])


def make_strict(values, upper=None) -> np.ndarray:
    """Sort ascending and nudge ties upward by one ulp until strictly increasing.

    With ``upper`` set, values pushed to or past it are walked back down below it
    (ties piled at the top end, e.g. several draws clamped to 1 - eps).
    """
    w = np.sort(np.asarray(values, dtype=np.float64))
    for k in range(1, w.size):
        if w[k] <= w[k - 1]:
            w[k] = np.nextafter(w[k - 1], np.inf)
    if upper is not None and w.size and w[-1] >= upper:
        w[-1] = np.nextafter(upper, -np.inf)
        for k in range(w.size - 2, -1, -1):
            w[k] = min(w[k], np.nextafter(w[k + 1], -np.inf))
    return w


def sample_ordered_weights(rng: Rng, alpha: float, k: int) -> np.ndarray:
    """K i.i.d. Beta(alpha, alpha) draws sorted so that w[0] < w[1] < ... < w[k-1]."""
    if int(k) < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return make_strict(sample_beta_array(rng, alpha, int(k)), upper=1.0)


@dataclass(frozen=True)
class DiscreteWeightDist:
    values: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        p = np.asarray(self.probs, dtype=np.float64)
        if v.shape != p.shape or v.ndim != 1 or v.size == 0:
            raise ValueError("values and probs must be matching non-empty 1-d arrays")
        if np.any(v <= 0) or np.any(v >= 1):
            raise ValueError("atom values must lie strictly inside (0, 1)")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("atom probabilities must be non-negative and sum to 1")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "probs", p)

    @classmethod
    def point(cls, value: float) -> "DiscreteWeightDist":
        return cls(np.array([value]), np.array([1.0]))

    def __len__(self):
        return self.values.size

    def mean(self) -> float:
        return float(np.dot(self.values, self.probs))

    def sample(self, rng: Rng, size: int) -> np.ndarray:
        return self.values[rng.gen.choice(self.values.size, size=size, p=self.probs)]


def discretize_beta(alpha: float, n_atoms: int) -> DiscreteWeightDist:
    """Midpoint atoms on ``n_atoms`` equal cells of (0, 1), weighted by the exact Beta cell mass."""
    _check_alpha(alpha)
    if int(n_atoms) < 1:
        raise ValueError(f"n_atoms must be >= 1, got {n_atoms}")
    edges = np.linspace(0.0, 1.0, int(n_atoms) + 1)
    mass = np.diff(betainc(alpha, alpha, edges))
    mass = mass / mass.sum()
    return DiscreteWeightDist(0.5 * (edges[:-1] + edges[1:]), mass)
