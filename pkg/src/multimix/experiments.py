"""Noisy-spiral study: data, training with/without (multi-)mixing, error, ECE, decision boundaries."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from multimix.rand_dist import Rng, sample_ordered_weights
from multimix.tinynet import (Mlp, OptimState, backward, forward, forward_manifold_mix, init_mlp,
                              loss_xent_soft, step)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class SpiralConfig:
    n: int = 1000
    classes: int = 2
    noise: float = 0.06
    flip_frac: float = 0.2
    train_frac: float = 0.4
    r_max: float = 1.0
    theta_max: float = 1.5 * math.pi


@dataclass
class SpiralDataset:
    x: np.ndarray
    y: np.ndarray  # observed labels (training labels may be flipped)
    y_clean: np.ndarray
    train: np.ndarray  # boolean masks
    test: np.ndarray
    flipped: np.ndarray
    classes: int = 2

    def split(self, name: str):
        mask = {"train": self.train, "test": self.test}[name]
        return self.x[mask], self.y[mask]


def spiral_arm(t, c, cfg: SpiralConfig):
    """Noise-free point(s) of arm ``c`` at curve parameter ``t`` in (0, 1]."""
    r = cfg.r_max * t
    theta = cfg.theta_max * t + c * 2 * math.pi / cfg.classes
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=-1)


def gen_spiral(rng: Rng, cfg: SpiralConfig = SpiralConfig()) -> SpiralDataset:
    if cfg.n < cfg.classes:
        raise ValueError("need at least one point per class")
    for name in ("flip_frac", "train_frac"):
        v = getattr(cfg, name)
        if not 0 <= v <= 1:
            raise ValueError(f"{name} must lie in [0, 1], got {v}")
    y = np.arange(cfg.n) % cfg.classes
    t = 1.0 - rng.uniform(size=cfg.n)  # (0, 1]
    x = spiral_arm(t, y, cfg) + rng.normal(0.0, cfg.noise, size=(cfg.n, 2)) if cfg.noise else \
        spiral_arm(t, y, cfg)
    order = rng.permutation(cfg.n)
    n_train = int(round(cfg.train_frac * cfg.n))
    train = np.zeros(cfg.n, bool)
    train[order[:n_train]] = True
    n_flip = int(math.floor(cfg.flip_frac * n_train + 0.5))
    flip_idx = order[:n_train][rng.permutation(n_train)[:n_flip]]
    flipped = np.zeros(cfg.n, bool)
    flipped[flip_idx] = True
    y_obs = y.copy()
    shift = rng.integers(1, cfg.classes, size=n_flip) if cfg.classes > 2 else 1
    y_obs[flip_idx] = (y[flip_idx] + shift) % cfg.classes
    return SpiralDataset(x, y_obs, y, train, ~train, flipped, cfg.classes)


@dataclass
class RunConfig:
    mixer: str = "manifold"  # "none", "input" or "manifold"
    k: int = 1
    alpha: float = 1.0
    layers: tuple[int, ...] = (1, 2)
    epochs: int = 3000
    batch_size: int = 256
    lr: float = 0.01
    l2: float = 1e-4
    hidden_layers: int = 8
    width: int = 6
    slope: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.k < 1 or self.epochs < 1:
            raise ValueError("k and epochs must be >= 1")
        if self.mixer not in ("none", "input", "manifold"):
            raise ValueError(f"unknown mixer {self.mixer!r}")

    def widths(self, d_in, classes):
        return [d_in] + [self.width] * self.hidden_layers + [classes]


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_error: float
    test_error: float
    test_loss: float
    mean_sq_gradnorm: float


@dataclass
class TrainResult:
    net: Mlp
    history: list[EpochMetrics] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def test_accuracy(self) -> float:
        return 100.0 - self.history[-1].test_error


def one_hot(y, classes):
    return np.eye(classes)[np.asarray(y)]


def mixed_batch_grad(net, xb, yb, cfg: RunConfig, rng: Rng):
    """Loss and gradient on one batch: K interpolations per pair, averaged over all K*B samples."""
    if cfg.mixer == "none":
        tr = forward(net, xb)
        return loss_xent_soft(tr, yb, cfg.l2, net), backward(net, tr, yb, cfg.l2)
    b = xb.shape[0]
    perm = rng.permutation(b)
    lam = np.repeat(sample_ordered_weights(rng, cfg.alpha, cfg.k), b)
    s = 0 if cfg.mixer == "input" else int(cfg.layers[rng.integers(0, len(cfg.layers))])
    xa, xm = np.tile(xb, (cfg.k, 1)), np.tile(xb[perm], (cfg.k, 1))
    ya, ym = np.tile(yb, (cfg.k, 1)), np.tile(yb[perm], (cfg.k, 1))
    labels = (1 - lam)[:, None] * ya + lam[:, None] * ym
    tr = forward_manifold_mix(net, xa, xm, s, lam)
    return loss_xent_soft(tr, labels, cfg.l2, net), backward(net, tr, labels, cfg.l2)


def evaluate(net, x, y, classes):
    tr = forward(net, x)
    return top1_error(net, x, y, trace=tr), loss_xent_soft(tr, one_hot(y, classes))


def train(data: SpiralDataset, cfg: RunConfig, log_every: int = 1, callback=None) -> TrainResult:
    """Mini-batch Adam training; metrics are recorded every ``log_every`` epochs and at the end."""
    t0 = time.perf_counter()
    rng = Rng(cfg.seed)
    xtr, ytr = data.split("train")
    xte, yte = data.split("test")
    ytr_soft = one_hot(ytr, data.classes)
    net = init_mlp(cfg.widths(xtr.shape[1], data.classes), rng.substream(0), cfg.slope)
    opt = OptimState("adam", lr=cfg.lr)
    result = TrainResult(net)
    n = xtr.shape[0]
    for epoch in range(1, cfg.epochs + 1):
        order = rng.substream(1, epoch).permutation(n)
        losses, sq_norms, sizes = [], [], []
        for j, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            loss, g = mixed_batch_grad(net, xtr[idx], ytr_soft[idx], cfg, rng.substream(2, epoch, j))
            if not math.isfinite(loss) or not np.all(np.isfinite(g)):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {j}: {loss}")
            step(net, g, opt)
            losses.append(loss)
            sq_norms.append(float(np.dot(g, g)))
            sizes.append(idx.size)
        if epoch % log_every == 0 or epoch == cfg.epochs:
            tr_err, _ = evaluate(net, xtr, ytr, data.classes)
            te_err, te_loss = evaluate(net, xte, yte, data.classes)
            m = EpochMetrics(epoch, float(np.average(losses, weights=sizes)), tr_err, te_err, te_loss,
                             float(np.mean(sq_norms)))
            result.history.append(m)
            if callback is not None:
                callback(net, m)
    result.seconds = time.perf_counter() - t0
    return result


def top1_error(net, x, y, trace=None) -> float:
    """Percent of rows whose argmax logit (ties -> lower class) differs from ``y``."""
    y = np.asarray(y)
    if y.size == 0:
        raise ValueError("empty split")
    tr = forward(net, x) if trace is None else trace
    return 100.0 * float(np.mean(np.argmax(tr.logits, axis=1) != y))


@dataclass
class EceReport:
    m: int
    counts: np.ndarray
    acc: np.ndarray
    conf: np.ndarray
    ece: float

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    def recompute(self) -> float:
        return float(sum(c / self.n * abs(a - f) for c, a, f in zip(self.counts, self.acc, self.conf) if c))


def ece_from_scores(confidence, correct, m: int = 10) -> EceReport:
    """Bins ((i-1)/M, i/M]; ECE = sum |B_i|/n * |acc(B_i) - conf(B_i)| over non-empty bins."""
    if m < 1:
        raise ValueError("need at least one bin")
    confidence = np.asarray(confidence, dtype=np.float64)
    correct = np.asarray(correct, dtype=np.float64)
    if confidence.size == 0:
        raise ValueError("empty split")
    edges = np.arange(1, m) / m
    idx = np.searchsorted(edges, confidence, side="left")
    counts = np.bincount(idx, minlength=m)
    acc = np.zeros(m)
    conf = np.zeros(m)
    for i in np.nonzero(counts)[0]:
        sel = idx == i
        acc[i] = correct[sel].mean()
        conf[i] = confidence[sel].mean()
    rep = EceReport(m, counts, acc, conf, 0.0)
    rep.ece = rep.recompute()
    return rep


def ece(net, x, y, m: int = 10) -> EceReport:
    probs = forward(net, x).probs
    return ece_from_scores(probs.max(axis=1), np.argmax(probs, axis=1) == np.asarray(y), m)


@dataclass
class BoundaryRaster:
    xs: np.ndarray  # cell-center x coordinates, left to right
    ys: np.ndarray  # cell-center y coordinates, top to bottom
    cls: np.ndarray  # (res, res) predicted class, row 0 = top
    conf: np.ndarray  # (res, res) max softmax

    @property
    def extent(self):
        return self.xs[0], self.xs[-1], self.ys[-1], self.ys[0]


PALETTE = np.array([[66, 133, 244], [234, 67, 53], [52, 168, 83], [251, 188, 5]], dtype=np.float64)


def boundary_grid(net, x, resolution=200, margin=0.1) -> BoundaryRaster:
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != 2:
        raise ValueError("decision boundaries need 2-D features")
    lo, hi = x.min(axis=0), x.max(axis=0)
    pad = margin * (hi - lo)
    lo, hi = lo - pad, hi + pad
    step_ = (hi - lo) / resolution
    xs = lo[0] + step_[0] * (np.arange(resolution) + 0.5)
    ys = hi[1] - step_[1] * (np.arange(resolution) + 0.5)
    gx, gy = np.meshgrid(xs, ys)
    probs = forward(net, np.column_stack([gx.ravel(), gy.ravel()])).probs
    shape = (resolution, resolution)
    return BoundaryRaster(xs, ys, np.argmax(probs, axis=1).reshape(shape), probs.max(axis=1).reshape(shape))


def boundary_image(raster: BoundaryRaster, x=None, y=None) -> np.ndarray:
    """Pale class colors (paler where less confident) with data points drawn as 3x3 dots."""
    res = raster.cls.shape[0]
    base = PALETTE[raster.cls % len(PALETTE)]
    tint = 0.25 + 0.35 * raster.conf[..., None]
    img = 255 * (1 - tint) + base * tint
    if x is not None:
        dx = raster.xs[1] - raster.xs[0]
        dy = raster.ys[0] - raster.ys[1]
        cols = np.floor((x[:, 0] - (raster.xs[0] - dx / 2)) / dx).astype(int)
        rows = np.floor(((raster.ys[0] + dy / 2) - x[:, 1]) / dy).astype(int)
        for r, c, lab in zip(rows, cols, y):
            img[max(r - 1, 0):r + 2, max(c - 1, 0):c + 2] = 0.6 * PALETTE[lab % len(PALETTE)]
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def export_boundary(net, data: SpiralDataset, resolution=200, csv_path=None, ppm_path=None,
                    points="train") -> BoundaryRaster:
    from multimix.persist import write_csv
    from multimix.ppm import write_ppm

    raster = boundary_grid(net, data.x, resolution)
    if csv_path is not None:
        gx, gy = np.meshgrid(raster.xs, raster.ys)
        rows = zip(gx.ravel(), gy.ravel(), raster.cls.ravel(), raster.conf.ravel())
        write_csv(csv_path, ["x", "y", "class", "confidence"], rows)
    if ppm_path is not None:
        px, py = data.split(points) if points else (None, None)
        write_ppm(ppm_path, boundary_image(raster, px, py))
    return raster


# ------------------------------------------------------------ the ablation study


def study_variants(k_multi: int = 5):
    """(name, mixer, K) for the three arms: no mixing, manifold K=1, manifold K=k_multi."""
    return [("none", "none", 1), ("manifold_k1", "manifold", 1), (f"multimix_k{k_multi}", "manifold", k_multi)]


def data_rng(seed: int) -> Rng:
    return Rng(1000 + seed)


def _study_job(job):
    spiral_cfg, run_cfg, log_every = job
    return train(gen_spiral(data_rng(run_cfg.seed), spiral_cfg), run_cfg, log_every)


def spiral_study(spiral_cfg: SpiralConfig, base: RunConfig, seeds, k_multi: int = 5, workers: int = 1,
                 log_every: int = 1) -> dict[tuple[str, int], TrainResult]:
    """Train every variant on every seed; seed s uses dataset ``data_rng(s)`` and training seed s."""
    from dataclasses import replace

    keys, jobs = [], []
    for name, mixer, k in study_variants(k_multi):
        for s in seeds:
            keys.append((name, s))
            jobs.append((spiral_cfg, replace(base, mixer=mixer, k=k, seed=s), log_every))
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_study_job, jobs))
    else:
        results = [_study_job(j) for j in jobs]
    return dict(zip(keys, results))


def study_medians(results, k_multi: int = 5) -> dict[str, float]:
    out = {}
    for name, _, _ in study_variants(k_multi):
        out[name] = float(np.median([r.test_accuracy for (v, _), r in results.items() if v == name]))
    return out


def ordering_holds(medians: dict[str, float], k_multi: int = 5) -> bool:
    """multi-mix >= manifold K=1 >= no mixing, on medians."""
    none, k1, multi = (medians[n] for n, _, _ in study_variants(k_multi))
    return multi >= k1 >= none
