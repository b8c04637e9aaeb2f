"""Independent oracles used by the tests.

These intentionally avoid the library's vectorized code paths: plain
Python loops and finite differences, so they stay meaningful as checks.
"""

from __future__ import annotations

import math

import numpy as np

from winforge import MeanFieldLayer, Network, chain_arch, init_network
from winforge.net import get_activation, network_forward
from winforge.train import InitSpec, Uniform


def act_scalar(name: str, x: float) -> float:
    if name == "tanh":
        return math.tanh(x)
    return 1.0 / (1.0 + math.exp(-x))


def layer_forward_loops(layer: MeanFieldLayer, z, act_name: str):
    """Straight-line per-neuron summation of the layer map."""
    m, d_out = layer.m, layer.d_out
    out = [0.0] * d_out
    for j in range(m):
        s = 0.0
        for a in range(layer.d_in):
            s += layer.theta0[j, a] * z[a]
        h = act_scalar(act_name, s)
        for b in range(d_out):
            out[b] += layer.theta1[j, b] * h
    return np.array([v / m for v in out])


def matmul_loops(a, b):
    """Naive triple-loop matrix product."""
    n, k = a.shape
    k2, p = b.shape
    assert k == k2
    out = np.zeros((n, p))
    for i in range(n):
        for j in range(p):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def discrepancy_two_pass(f: Network, g: Network, xs) -> float:
    """Per-sample forward calls, explicit mean, then sqrt."""
    total = 0.0
    for x in xs:
        ya, _ = network_forward(f, x)
        yb, _ = network_forward(g, x)
        total += float(np.sum((ya - yb) ** 2))
    return math.sqrt(total / len(xs))


def flatten_params(net: Network) -> np.ndarray:
    parts = []
    for b in net.blocks:
        if isinstance(b, MeanFieldLayer):
            parts.extend([b.theta0.ravel(), b.theta1.ravel()])
        else:
            parts.append(b.a.ravel())
    return np.concatenate(parts)


def net_with_params(net: Network, flat: np.ndarray) -> Network:
    from winforge import LinearMap

    blocks = []
    off = 0
    for b in net.blocks:
        if isinstance(b, MeanFieldLayer):
            t0 = flat[off: off + b.theta0.size].reshape(b.theta0.shape)
            off += b.theta0.size
            t1 = flat[off: off + b.theta1.size].reshape(b.theta1.shape)
            off += b.theta1.size
            blocks.append(MeanFieldLayer(t0, t1))
        else:
            a = flat[off: off + b.a.size].reshape(b.a.shape)
            off += b.a.size
            blocks.append(LinearMap(a))
    return Network(blocks, net.activation)


def fd_param_grad(net: Network, x, indices=None, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar output w.r.t. parameters.

    Returns gradients only at ``indices`` (all parameters when None).
    """
    flat = flatten_params(net)
    if indices is None:
        indices = range(flat.size)
    grads = np.zeros(len(list(indices)))
    indices = list(indices)
    for pos, idx in enumerate(indices):
        up = flat.copy()
        up[idx] += h
        dn = flat.copy()
        dn[idx] -= h
        yu, _ = network_forward(net_with_params(net, up), x)
        yd, _ = network_forward(net_with_params(net, dn), x)
        grads[pos] = (yu[0] - yd[0]) / (2 * h)
    return grads


def fd_check(analytic, numeric, rtol: float, atol: float = 1e-9) -> float:
    """Worst violation ratio in gradcheck form: |a - f| / (rtol*max(|a|,|f|) + atol).

    Values <= 1 mean every entry matches within rtol relative error, with an
    absolute floor just above the finite-difference oracle's own noise
    (truncation + cancellation at step 1e-5 is ~1e-12..1e-10).
    """
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    tol = rtol * np.maximum(np.abs(analytic), np.abs(numeric)) + atol
    return float(np.max(np.abs(analytic - numeric) / tol))


def small_net(seed: int, n_blocks: int = 3, d: int = 4, m: int = 6,
              activation: str = "tanh", scale: float = 1.0) -> Network:
    arch = chain_arch(n_blocks, m, d, activation=activation)
    return init_network(arch, InitSpec(Uniform(-scale, scale)), seed)
