import math

import numpy as np
import pytest

from multimix.experiments import (RunConfig, SpiralConfig, boundary_grid, ece, ece_from_scores,
                                  export_boundary, gen_spiral, spiral_arm, top1_error, train)
from multimix.persist import read_csv
from multimix.ppm import read_ppm
from multimix.rand_dist import Rng
from multimix.tinynet import Mlp, zeros_like_mlp


def test_split_sizes_and_flips():
    data = gen_spiral(Rng(0), SpiralConfig())
    assert data.train.sum() == 400 and data.test.sum() == 600
    assert not np.any(data.train & data.test)
    assert data.flipped.sum() == 80
    assert not np.any(data.flipped & data.test)
    assert np.all((data.y != data.y_clean) == data.flipped)
    assert np.bincount(data.y_clean).tolist() == [500, 500]


def test_no_flips():
    data = gen_spiral(Rng(1), SpiralConfig(flip_frac=0.0))
    assert not data.flipped.any() and np.array_equal(data.y, data.y_clean)


def test_flip_count_rounds_half_up():
    data = gen_spiral(Rng(2), SpiralConfig(n=50, train_frac=0.5, flip_frac=0.1))
    assert data.flipped.sum() == 3  # 0.1 * 25 = 2.5


def test_noiseless_points_on_arms():
    cfg = SpiralConfig(noise=0.0)
    data = gen_spiral(Rng(3), cfg)
    r = np.linalg.norm(data.x, axis=1)
    t = r / cfg.r_max
    assert np.max(np.abs(spiral_arm(t, data.y_clean, cfg) - data.x)) < 1e-9


def test_split_determinism():
    a = gen_spiral(Rng(7), SpiralConfig())
    b = gen_spiral(Rng(7), SpiralConfig())
    c = gen_spiral(Rng(8), SpiralConfig())
    assert np.array_equal(a.x, b.x) and np.array_equal(a.train, b.train)
    assert np.array_equal(a.flipped, b.flipped) and np.array_equal(a.y, b.y)
    assert not np.array_equal(a.train, c.train)


def test_bad_fractions():
    with pytest.raises(ValueError):
        gen_spiral(Rng(0), SpiralConfig(flip_frac=1.5))
    with pytest.raises(ValueError):
        gen_spiral(Rng(0), SpiralConfig(n=1))


def linear_net(w, b):
    return Mlp([np.asarray(w, float)], [np.asarray(b, float)])


def test_top1_error():
    net = linear_net([[1, 0], [-1, 0]], [0, 0])
    x = np.array([[1.0, 0.0], [2.0, 1.0], [-1.0, 0.5], [-3.0, 2.0]])
    assert top1_error(net, x, [0, 0, 1, 1]) == 0.0
    assert top1_error(net, x, [0, 1, 1, 1]) == 25.0
    # uniform logits: ties go to class 0, so a balanced split is half wrong
    flat = zeros_like_mlp([2, 2])
    assert top1_error(flat, x, [0, 1, 0, 1]) == 50.0
    with pytest.raises(ValueError):
        top1_error(net, np.zeros((0, 2)), [])


def test_error_accuracy_identity():
    data = gen_spiral(Rng(0), SpiralConfig())
    net = linear_net([[0.3, -1.0], [0.2, 0.4]], [0.1, 0.0])
    x, y = data.split("test")
    err = top1_error(net, x, y)
    acc = 100.0 * np.mean(np.argmax(x @ net.weights[0].T + net.biases[0], axis=1) == y)
    assert err == 100.0 - acc


def test_ece_hand_example():
    rep = ece_from_scores([0.9, 0.8, 0.6, 0.4], [1, 1, 0, 0], m=2)
    assert rep.counts.tolist() == [1, 3]
    assert math.isclose(rep.acc[1], 2 / 3) and math.isclose(rep.conf[1], 2.3 / 3)
    assert rep.acc[0] == 0 and rep.conf[0] == 0.4
    assert math.isclose(rep.ece, 0.175, abs_tol=1e-15)


def test_ece_perfect_and_empty_bins():
    rep = ece_from_scores([1.0, 1.0, 1.0], [1, 1, 1], m=10)
    assert rep.ece == 0.0 and rep.counts[-1] == 3 and rep.counts[:-1].sum() == 0
    # right-closed bins: 0.5 lands in the first of two bins
    assert ece_from_scores([0.5], [1], m=2).counts.tolist() == [1, 0]
    with pytest.raises(ValueError):
        ece_from_scores([], [], 10)
    with pytest.raises(ValueError):
        ece_from_scores([0.5], [1], 0)


def test_ece_consistency_on_net():
    data = gen_spiral(Rng(0), SpiralConfig())
    net = linear_net([[0.3, -1.0], [0.2, 0.4]], [0.1, 0.0])
    rep = ece(net, *data.split("test"))
    assert rep.m == 10 and rep.n == 600
    assert rep.ece == rep.recompute() and 0 <= rep.ece <= 1


def test_boundary_constant_net(tmp_path):
    data = gen_spiral(Rng(0), SpiralConfig())
    net = linear_net(np.zeros((2, 2)), [0.0, 1.0])
    raster = export_boundary(net, data, 32, tmp_path / "b.csv", tmp_path / "b.ppm", points=None)
    assert raster.cls.shape == (32, 32) and np.all(raster.cls == 1)
    img = read_ppm(tmp_path / "b.ppm")
    assert img.shape == (32, 32, 3)
    assert len(np.unique(img.reshape(-1, 3), axis=0)) == 1
    rows = read_csv(tmp_path / "b.csv")
    assert len(rows) == 32 * 32 and set(r["class"] for r in rows) == {"1"}


def test_boundary_extent_has_margin():
    x = np.array([[0.0, 0.0], [1.0, 2.0]])
    raster = boundary_grid(zeros_like_mlp([2, 2]), x, 10)
    dx = raster.xs[1] - raster.xs[0]
    assert math.isclose(raster.xs[0] - dx / 2, -0.1) and math.isclose(raster.xs[-1] + dx / 2, 1.1)
    assert math.isclose(raster.ys[0] + (raster.ys[0] - raster.ys[1]) / 2, 2.2)
    with pytest.raises(ValueError):
        boundary_grid(zeros_like_mlp([3, 2]), np.zeros((4, 3)))


def test_boundary_linear_halfplane():
    w = np.array([[1.0, 2.0], [-0.5, 0.3]])
    b = np.array([0.2, -0.1])
    net = linear_net(w, b)
    rng = Rng(5)
    x = rng.uniform(-1, 1, size=(50, 2))
    raster = boundary_grid(net, x, 64)
    gx, gy = np.meshgrid(raster.xs, raster.ys)
    nrm = w[0] - w[1]
    margin = nrm[0] * gx + nrm[1] * gy + (b[0] - b[1])
    dist = np.abs(margin) / np.linalg.norm(nrm)
    cell = np.hypot(raster.xs[1] - raster.xs[0], raster.ys[0] - raster.ys[1])
    expected = np.where(margin > 0, 0, 1)
    wrong = raster.cls != expected
    assert np.all(dist[wrong] <= cell)
    assert not np.any(wrong[dist > 1e-9])


def test_short_training_smoke():
    data = gen_spiral(Rng(1000), SpiralConfig())
    res = train(data, RunConfig(mixer="none", epochs=50, seed=0))
    assert len(res.history) == 50
    loss = np.array([m.train_loss for m in res.history])
    ma = np.convolve(loss, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(ma) <= 0)
    assert all(np.isfinite(m.mean_sq_gradnorm) for m in res.history)


def test_training_determinism_and_k():
    data = gen_spiral(Rng(1000), SpiralConfig(n=200))
    a = train(data, RunConfig(k=3, epochs=5, seed=4))
    b = train(data, RunConfig(k=3, epochs=5, seed=4))
    assert np.array_equal(a.net.flat(), b.net.flat())
    assert [m.test_error for m in a.history] == [m.test_error for m in b.history]
    c = train(data, RunConfig(mixer="input", k=2, epochs=3, seed=4, hidden_layers=2), log_every=2)
    assert [m.epoch for m in c.history] == [2, 3]
    with pytest.raises(ValueError):
        RunConfig(k=0)
