import numpy as np
import pytest

from multimix.rand_dist import Rng
from multimix.tinynet import (Mlp, OptimState, StaleTraceError, backward, forward,
                              forward_manifold_mix, init_mlp, load_checkpoint, loss_xent_soft,
                              per_sample_grads, save_checkpoint, softmax, step, zeros_like_mlp)


def fd_grad(loss_fn, net, h=1e-5):
    """Central differences of loss_fn(net) over every parameter."""
    theta = net.flat()
    g = np.zeros_like(theta)
    for i in range(theta.size):
        for sign in (1, -1):
            t = theta.copy()
            t[i] += sign * h
            net.set_flat(t)
            g[i] += sign * loss_fn(net)
    net.set_flat(theta)
    return g / (2 * h)


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6))


def small_case(seed):
    rng = Rng(seed)
    net = init_mlp([2, 16, 16, 3], rng)
    x = rng.normal(size=(8, 2))
    y = softmax(rng.normal(size=(8, 3)))
    return net, x, y


def test_finite_difference_plain():
    net, x, y = small_case(0)
    g = backward(net, forward(net, x), y)

    fd = fd_grad(lambda n: loss_xent_soft(forward(n, x), y), net)
    assert rel_err(g, fd) < 1e-5


def test_finite_difference_with_l2():
    net, x, y = small_case(1)
    g = backward(net, forward(net, x), y, l2=0.1)
    fd = fd_grad(lambda n: loss_xent_soft(forward(n, x), y, 0.1, n), net)
    assert rel_err(g, fd) < 1e-5


@pytest.mark.parametrize("s", [0, 1, 2])
def test_finite_difference_manifold(s):
    net, x, y = small_case(2 + s)
    xb = Rng(99).normal(size=x.shape)
    lam = np.linspace(0.1, 0.9, 8)
    g = backward(net, forward_manifold_mix(net, x, xb, s, lam), y)
    fd = fd_grad(lambda n: loss_xent_soft(forward_manifold_mix(n, x, xb, s, lam), y), net)
    assert rel_err(g, fd) < 1e-5


def test_per_sample_grads_average_to_batch_grad():
    net, x, y = small_case(5)
    tr = forward_manifold_mix(net, x, x[::-1], 1, 0.3)
    assert np.allclose(per_sample_grads(net, tr, y).mean(axis=0), backward(net, tr, y), atol=1e-14)


def test_zero_net_uniform_softmax():
    net = zeros_like_mlp([3, 4, 5])
    tr = forward(net, np.ones((2, 3)))
    assert np.all(tr.logits == 0)
    assert np.allclose(tr.probs, 0.2)


def test_identity_linear_layer():
    net = Mlp([np.eye(3)], [np.zeros(3)])
    x = np.array([[1.0, -2.0, 0.5]])
    assert np.array_equal(forward(net, x).logits, x)


def test_softmax_rows_sum_to_one():
    net, x, _ = small_case(6)
    assert np.allclose(forward(net, 50 * x).probs.sum(axis=1), 1, atol=1e-12)


def test_shape_mismatch():
    net, _, _ = small_case(0)
    with pytest.raises(ValueError):
        forward(net, np.zeros((2, 3)))
    with pytest.raises(ValueError):
        forward_manifold_mix(net, np.zeros((2, 2)), np.zeros((2, 2)), 3, 0.5)


def test_manifold_reductions():
    net, x, _ = small_case(7)
    xb = x[::-1] + 1
    lam = 0.37
    assert np.allclose(forward_manifold_mix(net, x, xb, 0, lam).logits,
                       forward(net, (1 - lam) * x + lam * xb).logits, atol=1e-13)
    for s in (0, 1, 2):
        assert np.allclose(forward_manifold_mix(net, x, x, s, 0.8).logits, forward(net, x).logits,
                           atol=1e-13)
        tiny = forward_manifold_mix(net, x, xb, s, 1e-12).logits
        assert np.allclose(tiny, forward(net, x).logits, atol=1e-9)


def test_manifold_gradient_limit():
    net, x, y = small_case(8)
    xb = x + 2
    plain = backward(net, forward(net, x), y)
    for s in (1, 2):
        mixed = backward(net, forward_manifold_mix(net, x, xb, s, 1e-12), y)
        assert np.allclose(mixed, plain, atol=1e-9)


def test_loss_values():
    net = zeros_like_mlp([2, 4])
    tr = forward(net, np.zeros((3, 2)))
    y = np.eye(4)[[0, 1, 2]]
    assert np.isclose(loss_xent_soft(tr, y), np.log(4))
    net2, x, _ = small_case(9)
    tr = forward(net2, x)
    p = tr.probs
    assert np.isclose(loss_xent_soft(tr, p), np.mean(-np.sum(p * np.log(p), axis=1)))
    ya, yb = np.eye(3)[[0] * 8], np.eye(3)[[2] * 8]
    assert np.isclose(loss_xent_soft(tr, 0.5 * ya + 0.5 * yb),
                      0.5 * loss_xent_soft(tr, ya) + 0.5 * loss_xent_soft(tr, yb))


def test_zero_gradient_fixed_point():
    net, x, _ = small_case(10)
    tr = forward(net, x)
    assert np.linalg.norm(backward(net, tr, tr.probs)) < 1e-9


def test_mix_node_gradient_split():
    # dLoss/dh^s of each branch equals (1-lam) and lam times dLoss/dh_mix, checked by perturbing h^s
    net, x, y = small_case(11)
    xb = x[::-1] * 0.5
    s, lam = 1, 0.3
    full = backward(net, forward_manifold_mix(net, x, xb, s, lam), y)

    # network above the mix node, fed h_mix directly
    top = Mlp([w.copy() for w in net.weights[s:]], [b.copy() for b in net.biases[s:]], net.slope)
    ha = forward_manifold_mix(net, x, x, s, 0.0).hs[0]
    hb = forward_manifold_mix(net, xb, xb, s, 0.0).hs[0]
    hmix = (1 - lam) * ha + lam * hb

    def loss_at(h):
        z = h
        for l, (W, b) in enumerate(zip(top.weights, top.biases)):
            z = z @ W.T + b
            if l < top.n_layers - 1:
                z = np.where(z > 0, z, top.slope * z)
        return -np.mean(np.sum(y * (z - z.max(1, keepdims=True)
                                    - np.log(np.exp(z - z.max(1, keepdims=True)).sum(1, keepdims=True))), 1))

    eps = 1e-6
    d_mix = np.zeros_like(hmix)
    for idx in np.ndindex(*hmix.shape):
        e = np.zeros_like(hmix)
        e[idx] = eps
        d_mix[idx] = (loss_at(hmix + e) - loss_at(hmix - e)) / (2 * eps)
    # first-layer gradient from each branch: dW_1 = sum_n dz_n x_n^T with dz = dh * act'(z)
    z_a = x @ net.weights[0].T + net.biases[0]
    z_b = xb @ net.weights[0].T + net.biases[0]
    da = (1 - lam) * d_mix * np.where(z_a > 0, 1, net.slope)
    db = lam * d_mix * np.where(z_b > 0, 1, net.slope)
    expected_w1 = da.T @ x + db.T @ xb
    w1 = full[:net.weights[0].size].reshape(net.weights[0].shape)
    assert np.allclose(w1, expected_w1, atol=1e-8)


def test_stale_trace_rejected():
    net, x, y = small_case(12)
    tr = forward(net, x)
    step(net, backward(net, tr, y), OptimState("sgd", lr=0.1))
    with pytest.raises(StaleTraceError):
        backward(net, tr, y)


def test_sgd_step_exact():
    net, x, y = small_case(13)
    theta = net.flat()
    g = backward(net, forward(net, x), y)
    step(net, g, OptimState("sgd", lr=0.05))
    assert np.array_equal(net.flat(), theta - 0.05 * g)
    before = net.flat()
    step(net, np.zeros_like(g), OptimState("sgd", lr=0.05))
    assert np.array_equal(net.flat(), before)


def test_adam_first_step():
    net, x, y = small_case(14)
    theta = net.flat()
    g = backward(net, forward(net, x), y)
    step(net, g, OptimState("adam", lr=0.01))
    # by hand: m = 0.1 g, v = 0.001 g^2, m_hat = g, v_hat = g^2
    expected = theta - 0.01 * g / (np.abs(g) + 1e-8)
    assert np.allclose(net.flat(), expected, rtol=0, atol=1e-15)


def test_schedule():
    opt = OptimState("sgd", lr=1.0, milestones=(2, 4), gamma=0.1)
    net = zeros_like_mlp([1, 1])
    lrs = []
    for _ in range(5):
        lrs.append(opt.current_lr())
        step(net, np.ones(2), opt)
    assert np.allclose(lrs, [1, 1, 0.1, 0.1, 0.01])


def test_momentum():
    net = zeros_like_mlp([1, 1])
    opt = OptimState("sgd", lr=1.0, momentum=0.5)
    step(net, np.ones(2), opt)
    step(net, np.ones(2), opt)
    assert np.allclose(net.flat(), -2.5)


def test_checkpoint_roundtrip(tmp_path):
    net, x, _ = small_case(15)
    path = tmp_path / "net.ckpt"
    save_checkpoint(net, path)
    head = path.read_bytes().split(b"\n", 1)[0]
    assert head == b"MLP widths=2,16,16,3 slope=0.01"
    back = load_checkpoint(path)
    assert back.widths == net.widths
    assert np.array_equal(back.flat(), net.flat())
    assert np.array_equal(forward(back, x).logits, forward(net, x).logits)
    assert path.stat().st_size == len(head) + 1 + 8 * net.n_params


def test_determinism():
    a = init_mlp([2, 6, 6, 2], Rng(3))
    b = init_mlp([2, 6, 6, 2], Rng(3))
    assert np.array_equal(a.flat(), b.flat())
