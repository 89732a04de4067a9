"""Small leaky-ReLU MLP with hand-written backprop and manifold mixing at a hidden layer.

Layers are indexed so that ``h[0]`` is the input and ``h[l] = act(h[l-1] @ W_l.T + b_l)``
for hidden layers; the last layer is linear (logits). Mixing at layer ``s``
interpolates ``h[s]`` of two inputs, so ``s = 0`` is plain input mixup.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import count
from pathlib import Path

import numpy as np

from multimix.rand_dist import Rng

_net_ids = count()


class StaleTraceError(RuntimeError):
    """Raised when backward is handed a trace computed with older parameters."""


@dataclass
class Mlp:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    slope: float = 0.01
    version: int = 0
    uid: int = field(default_factory=lambda: next(_net_ids))

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ValueError(f"layer {l}: W {W.shape} and b {b.shape} inconsistent")
            if l and W.shape[1] != self.weights[l - 1].shape[0]:
                raise ValueError(f"layer {l} input width does not match layer {l - 1}")

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def flat(self) -> np.ndarray:
        """Parameters in canonical order W_1, b_1, W_2, b_2, ... (row-major)."""
        return np.concatenate([p.ravel() for W, b in zip(self.weights, self.biases) for p in (W, b)])

    def set_flat(self, theta: np.ndarray):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {theta.size}")
        if not np.all(np.isfinite(theta)):
            raise FloatingPointError("non-finite parameters")
        i = 0
        for W, b in zip(self.weights, self.biases):
            W[...] = theta[i:i + W.size].reshape(W.shape)
            i += W.size
            b[...] = theta[i:i + b.size]
            i += b.size
        self.version += 1

    def copy(self) -> "Mlp":
        return Mlp([W.copy() for W in self.weights], [b.copy() for b in self.biases], self.slope)


def init_mlp(widths, rng: Rng, slope=0.01) -> Mlp:
    """He fan-in initialization, zero biases."""
    ws, bs = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        ws.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    return Mlp(ws, bs, slope)


def zeros_like_mlp(widths, slope=0.01) -> Mlp:
    return Mlp([np.zeros((o, i)) for i, o in zip(widths[:-1], widths[1:])],
               [np.zeros(o) for o in widths[1:]], slope)


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


@dataclass
class ForwardTrace:
    hs: list[np.ndarray]  # h[s..L-1]: inputs to layers s+1..L
    zs: list[np.ndarray]  # pre-activations of layers s+1..L (last one = logits)
    logits: np.ndarray
    probs: np.ndarray
    s: int = 0
    lam: np.ndarray | None = None
    # below-mix branches: (hs, zs) for layers 1..s on each input
    branch_a: tuple | None = None
    branch_b: tuple | None = None
    net_uid: int = -1
    net_version: int = -1


def _act(net, z):
    return np.where(z > 0, z, net.slope * z)


def _dact(net, z):
    return np.where(z > 0, 1.0, net.slope)


def _run(net, h, start, stop):
    """Apply layers start+1..stop to h; returns (inputs, pre-activations)."""
    hs, zs = [h], []
    for l in range(start, stop):
        z = hs[-1] @ net.weights[l].T + net.biases[l]
        zs.append(z)
        hs.append(z if l == net.n_layers - 1 else _act(net, z))
    return hs, zs


def _check_input(net, x):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != net.widths[0]:
        raise ValueError(f"expected {net.widths[0]} input features, got {x.shape[1]}")
    return x


def forward(net: Mlp, x) -> ForwardTrace:
    x = _check_input(net, x)
    hs, zs = _run(net, x, 0, net.n_layers)
    logits = hs.pop()
    return ForwardTrace(hs, zs, logits, softmax(logits), net_uid=net.uid, net_version=net.version)


def forward_manifold_mix(net: Mlp, xa, xb, s: int, lam) -> ForwardTrace:
    """Forward pass that mixes h[s] of ``xa`` and ``xb`` with weight ``lam`` (scalar or per row)."""
    if not 0 <= s < net.n_layers:
        raise ValueError(f"mix layer must be in 0..{net.n_layers - 1}, got {s}")
    xa, xb = _check_input(net, xa), _check_input(net, xb)
    if xa.shape != xb.shape:
        raise ValueError("mixed batches must have the same shape")
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (xa.shape[0],)).copy()
    ha, za = _run(net, xa, 0, s)
    hb, zb = _run(net, xb, 0, s)
    hmix = (1.0 - lam)[:, None] * ha[-1] + lam[:, None] * hb[-1]
    hs, zs = _run(net, hmix, s, net.n_layers)
    logits = hs.pop()
    return ForwardTrace(hs, zs, logits, softmax(logits), s, lam,
                        (ha[:-1], za), (hb[:-1], zb), net.uid, net.version)


def loss_xent_soft(trace: ForwardTrace, labels, l2=0.0, net: Mlp | None = None) -> float:
    """Mean soft-label cross-entropy, plus (l2/2)*||theta||^2 when ``l2`` and ``net`` are given."""
    labels = np.atleast_2d(labels)
    if labels.shape != trace.logits.shape:
        raise ValueError(f"labels {labels.shape} do not match logits {trace.logits.shape}")
    loss = -np.mean(np.sum(labels * log_softmax(trace.logits), axis=1))
    if l2 and net is not None:
        loss += 0.5 * l2 * float(np.dot(net.flat(), net.flat()))
    return float(loss)


def _deltas(net, trace, labels):
    """Per-sample dLoss_n/dz for every layer, paired with that layer's input.

    Returns a list of (layer index, input rows, delta rows); a layer below the
    mix point appears twice, once per branch.
    """
    if trace.net_uid != net.uid or trace.net_version != net.version:
        raise StaleTraceError("trace was computed with different parameters")
    labels = np.atleast_2d(labels)
    if labels.shape != trace.logits.shape:
        raise ValueError(f"labels {labels.shape} do not match logits {trace.logits.shape}")
    out = []
    dz = trace.probs - labels
    s = trace.s
    for i in range(len(trace.zs) - 1, -1, -1):
        l = s + i  # weight index of this layer
        out.append((l, trace.hs[i], dz))
        dh = dz @ net.weights[l]
        if i > 0:
            dz = dh * _dact(net, trace.zs[i - 1])
        else:
            dh_mix = dh
    if s > 0:
        lam = trace.lam[:, None]
        for (hs, zs), w in ((trace.branch_a, 1.0 - lam), (trace.branch_b, lam)):
            dh = w * dh_mix
            for l in range(s - 1, -1, -1):
                dz = dh * _dact(net, zs[l])
                out.append((l, hs[l], dz))
                dh = dz @ net.weights[l]
    return out


def _assemble(net, parts):
    return np.concatenate([p.ravel() for pair in parts for p in pair])


def backward(net: Mlp, trace: ForwardTrace, labels, l2=0.0) -> np.ndarray:
    """Exact gradient of :func:`loss_xent_soft` w.r.t. ``net.flat()``."""
    n = trace.logits.shape[0]
    grads = [[np.zeros_like(W), np.zeros_like(b)] for W, b in zip(net.weights, net.biases)]
    for l, h, dz in _deltas(net, trace, labels):
        grads[l][0] += dz.T @ h
        grads[l][1] += dz.sum(axis=0)
    g = _assemble(net, grads) / n
    if l2:
        g += l2 * net.flat()
    return g


def per_sample_grads(net: Mlp, trace: ForwardTrace, labels, l2=0.0) -> np.ndarray:
    """(N, P) matrix whose row n is the gradient of sample n's own loss."""
    n = trace.logits.shape[0]
    grads = [[np.zeros((n,) + W.shape), np.zeros((n,) + b.shape)]
             for W, b in zip(net.weights, net.biases)]
    for l, h, dz in _deltas(net, trace, labels):
        grads[l][0] += dz[:, :, None] * h[:, None, :]
        grads[l][1] += dz
    g = np.concatenate([p.reshape(n, -1) for pair in grads for p in pair], axis=1)
    if l2:
        g += l2 * net.flat()
    return g


@dataclass
class OptimState:
    kind: str = "adam"  # "adam" or "sgd"
    lr: float = 0.01
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # piecewise-constant schedule: lr *= gamma at each milestone (counted in steps)
    milestones: tuple[int, ...] = ()
    gamma: float = 0.1
    t: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def current_lr(self) -> float:
        passed = sum(1 for ms in self.milestones if self.t >= ms)
        return self.lr * self.gamma**passed


def step(net: Mlp, grad: np.ndarray, opt: OptimState):
    """One in-place update of ``net``; returns ``(net, opt)``."""
    theta = net.flat()
    if grad.shape != theta.shape:
        raise ValueError(f"gradient has shape {grad.shape}, parameters {theta.shape}")
    lr = opt.current_lr()
    opt.t += 1
    if opt.m is None:
        opt.m = np.zeros_like(theta)
        opt.v = np.zeros_like(theta)
    if opt.kind == "sgd":
        if opt.momentum:
            opt.m = opt.momentum * opt.m + grad
            theta = theta - lr * opt.m
        else:
            theta = theta - lr * grad
    elif opt.kind == "adam":
        opt.m = opt.beta1 * opt.m + (1 - opt.beta1) * grad
        opt.v = opt.beta2 * opt.v + (1 - opt.beta2) * grad**2
        mhat = opt.m / (1 - opt.beta1**opt.t)
        vhat = opt.v / (1 - opt.beta2**opt.t)
        theta = theta - lr * mhat / (np.sqrt(vhat) + opt.eps)
    else:
        raise ValueError(f"unknown optimizer {opt.kind!r}")
    net.set_flat(theta)
    return net, opt


def save_checkpoint(net: Mlp, path):
    """One ASCII header line, then the flat parameters as little-endian float64."""
    header = "MLP widths={} slope={!r}\n".format(",".join(map(str, net.widths)), net.slope)
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(net.flat().astype("<f8").tobytes())


def load_checkpoint(path) -> Mlp:
    data = Path(path).read_bytes()
    nl = data.index(b"\n")
    fields = dict(tok.split("=", 1) for tok in data[:nl].decode("ascii").split()[1:])
    widths = [int(w) for w in fields["widths"].split(",")]
    net = zeros_like_mlp(widths, float(fields["slope"]))
    theta = np.frombuffer(data[nl + 1:], dtype="<f8")
    net.set_flat(theta)
    return net
