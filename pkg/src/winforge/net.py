"""Mean-field network core: blocks, forward evaluation, analytic gradients.

A mean-field layer with m neurons maps an input z to the average
``(1/m) * sum_j theta1_j * act(<theta0_j, z>)``; the 1/m factor is part of
the layer definition, not a convention of this implementation. Linear
blocks are pure matrix maps with no bias. All arithmetic is float64 and
every operation here is pure: blocks are immutable after construction.

Gradients are hand-derived reverse mode. For a mean-field layer with
pre-activations ``s_j = <theta0_j, z>`` and upstream cotangent ``u``:

    d/dtheta1_j = (1/m) * act(s_j) * u
    d/dtheta0_j = (1/m) * <theta1_j, u> * act'(s_j) * z
    d/dz        = (1/m) * sum_j <theta1_j, u> * act'(s_j) * theta0_j
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NonFiniteError


# --------------------------------------------------------------------------
# Activations


class Activation:
    """Element-wise nonlinearity with bounded value and first two derivatives.

    ``deriv_from_value`` computes the derivative from the activation value
    itself (no second transcendental evaluation), which the hot training
    path relies on.
    """

    def __init__(self, name, fn, deriv, second_deriv, deriv_from_value):
        self.name = name
        self.fn = fn
        self.deriv = deriv
        self.second_deriv = second_deriv
        self.deriv_from_value = deriv_from_value

    def __repr__(self):
        return f"Activation({self.name!r})"


def _sigmoid(x):
    # tanh form is stable for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _sigmoid_deriv(x):
    s = _sigmoid(x)
    return s * (1.0 - s)


def _sigmoid_second(x):
    s = _sigmoid(x)
    return s * (1.0 - s) * (1.0 - 2.0 * s)


TANH = Activation(
    "tanh",
    np.tanh,
    lambda x: 1.0 - np.tanh(x) ** 2,
    lambda x: -2.0 * np.tanh(x) * (1.0 - np.tanh(x) ** 2),
    lambda v: 1.0 - v * v,
)
SIGMOID = Activation(
    "sigmoid", _sigmoid, _sigmoid_deriv, _sigmoid_second, lambda v: v * (1.0 - v)
)

ACTIVATIONS = {"tanh": TANH, "sigmoid": SIGMOID}


def get_activation(kind) -> Activation:
    if isinstance(kind, Activation):
        return kind
    try:
        return ACTIVATIONS[kind]
    except KeyError:
        raise DimensionError(f"unknown activation kind {kind!r}") from None


# --------------------------------------------------------------------------
# Blocks


def _as_float_array(a, name: str) -> np.ndarray:
    arr = np.array(a, dtype=np.float64, copy=True)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class NeuronParams:
    """One neuron: input weights theta0 (d_in) and output weights theta1 (d_out)."""

    theta0: np.ndarray
    theta1: np.ndarray


class MeanFieldLayer:
    """Averaging layer over m neurons.

    Parameters are stored row-wise: ``theta0[j]`` and ``theta1[j]`` are
    neuron j's weights. Width m is implied by the array shapes.
    """

    kind = "meanfield"

    def __init__(self, theta0, theta1):
        theta0 = _as_float_array(theta0, "theta0")
        theta1 = _as_float_array(theta1, "theta1")
        if theta0.ndim != 2 or theta1.ndim != 2:
            raise DimensionError("theta0 and theta1 must be 2-d (m, dim) arrays")
        if theta0.shape[0] != theta1.shape[0]:
            raise DimensionError(
                f"neuron count mismatch: theta0 has {theta0.shape[0]} rows, "
                f"theta1 has {theta1.shape[0]}"
            )
        if theta0.shape[0] < 1:
            raise DimensionError("a mean-field layer needs at least one neuron")
        self.theta0 = theta0
        self.theta1 = theta1

    @classmethod
    def from_neurons(cls, neurons) -> "MeanFieldLayer":
        if not neurons:
            raise DimensionError("a mean-field layer needs at least one neuron")
        return cls(
            np.stack([np.asarray(n.theta0, dtype=np.float64) for n in neurons]),
            np.stack([np.asarray(n.theta1, dtype=np.float64) for n in neurons]),
        )

    @property
    def m(self) -> int:
        return self.theta0.shape[0]

    @property
    def d_in(self) -> int:
        return self.theta0.shape[1]

    @property
    def d_out(self) -> int:
        return self.theta1.shape[1]

    @property
    def neurons(self) -> list[NeuronParams]:
        return [NeuronParams(self.theta0[j], self.theta1[j]) for j in range(self.m)]

    def n_params(self) -> int:
        return self.theta0.size + self.theta1.size

    def __repr__(self):
        return f"MeanFieldLayer(m={self.m}, d_in={self.d_in}, d_out={self.d_out})"


class LinearMap:
    """Pure linear block y = A z, no bias."""

    kind = "linear"

    def __init__(self, a):
        a = _as_float_array(a, "a")
        if a.ndim != 2:
            raise DimensionError("linear map matrix must be 2-d")
        self.a = a

    @property
    def rows(self) -> int:
        return self.a.shape[0]

    @property
    def cols(self) -> int:
        return self.a.shape[1]

    @property
    def d_in(self) -> int:
        return self.cols

    @property
    def d_out(self) -> int:
        return self.rows

    def n_params(self) -> int:
        return self.a.size

    def __repr__(self):
        return f"LinearMap({self.rows}x{self.cols})"


Block = MeanFieldLayer | LinearMap


class Network:
    """Ordered block composition with a single activation kind."""

    def __init__(self, blocks, activation):
        blocks = list(blocks)
        if not blocks:
            raise DimensionError("network needs at least one block")
        act = get_activation(activation)
        for k in range(len(blocks) - 1):
            if blocks[k].d_out != blocks[k + 1].d_in:
                raise DimensionError(
                    f"dimension chain broken between blocks {k} and {k + 1}: "
                    f"{blocks[k].d_out} -> {blocks[k + 1].d_in}"
                )
        self.blocks = blocks
        self.activation = act

    @property
    def input_dim(self) -> int:
        return self.blocks[0].d_in

    @property
    def output_dim(self) -> int:
        return self.blocks[-1].d_out

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def mean_field_indices(self) -> list[int]:
        return [i for i, b in enumerate(self.blocks) if isinstance(b, MeanFieldLayer)]

    def n_params(self) -> int:
        return sum(b.n_params() for b in self.blocks)

    def copy(self) -> "Network":
        out = []
        for b in self.blocks:
            if isinstance(b, MeanFieldLayer):
                out.append(MeanFieldLayer(b.theta0, b.theta1))
            else:
                out.append(LinearMap(b.a))
        return Network(out, self.activation)

    def prefix(self, n_blocks: int) -> "Network":
        return Network(self.blocks[:n_blocks], self.activation)

    def suffix(self, start: int) -> "Network":
        return Network(self.blocks[start:], self.activation)

    def __repr__(self):
        return f"Network({self.blocks!r}, activation={self.activation.name!r})"


# --------------------------------------------------------------------------
# Batched kernels over raw parameter arrays. Z has shape (N, d_in); these
# are the workhorses shared by the per-sample ops, training, and metrics.
# BLAS reductions are deterministic for fixed shapes, which is what the
# reproducibility contract relies on.


def mf_forward(theta0, theta1, Z, act: Activation):
    m = theta0.shape[0]
    S = Z @ theta0.T                # (N, m) pre-activations
    Y = (act.fn(S) @ theta1) / m    # (N, d_out)
    return Y, S


def mf_forward_full(theta0, theta1, Z, act: Activation):
    """Forward that also returns the activation values (for fast backward)."""
    m = theta0.shape[0]
    S = Z @ theta0.T
    H = act.fn(S)
    return (H @ theta1) / m, S, H


def mf_backward(theta0, theta1, Z, S, U, act: Activation, H=None):
    m = theta0.shape[0]
    if H is None:
        H = act.fn(S)
    Hp = act.deriv_from_value(H)
    TU = U @ theta1.T       # (N, m): <theta1_j, u_i>
    coeff = TU * Hp         # (N, m)
    g1 = (H.T @ U) / m      # (m, d_out)
    g0 = (coeff.T @ Z) / m  # (m, d_in)
    gZ = (coeff @ theta0) / m
    return g0, g1, gZ


def lin_forward(a, Z):
    return Z @ a.T


def lin_backward(a, Z, U):
    gA = U.T @ Z    # (rows, cols)
    gZ = U @ a      # (N, cols)
    return gA, gZ


# --------------------------------------------------------------------------
# Per-sample operations (the contract surface)


def _check_vector(z, expected, what, block=None):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.shape[0] != expected:
        raise DimensionError(
            f"{what} has shape {z.shape}, expected ({expected},)", block=block
        )
    if not np.all(np.isfinite(z)):
        raise NonFiniteError(f"{what} contains non-finite entries", block=block)
    return z


def layer_forward(layer: MeanFieldLayer, z, act) -> np.ndarray:
    """(1/m) * sum_j theta1_j * act(<theta0_j, z>)."""
    act = get_activation(act)
    z = _check_vector(z, layer.d_in, "layer input")
    s = layer.theta0 @ z
    return (act.fn(s) @ layer.theta1) / layer.m


def layer_backward(layer: MeanFieldLayer, z, upstream, act):
    """Gradients of <layer_forward(z), upstream> w.r.t. (theta0, theta1, z)."""
    act = get_activation(act)
    z = _check_vector(z, layer.d_in, "layer input")
    upstream = _check_vector(upstream, layer.d_out, "upstream cotangent")
    m = layer.m
    s = layer.theta0 @ z
    h = act.fn(s)
    hp = act.deriv(s)
    tu = layer.theta1 @ upstream          # (m,)
    grad_theta1 = np.outer(h, upstream) / m
    grad_theta0 = np.outer(tu * hp, z) / m
    grad_z = ((tu * hp) @ layer.theta0) / m
    return grad_theta0, grad_theta1, grad_z


def linear_forward(lin: LinearMap, z) -> np.ndarray:
    z = _check_vector(z, lin.cols, "linear input")
    return lin.a @ z


def linear_backward(lin: LinearMap, z, upstream):
    z = _check_vector(z, lin.cols, "linear input")
    upstream = _check_vector(upstream, lin.rows, "upstream cotangent")
    grad_a = np.outer(upstream, z)
    grad_z = lin.a.T @ upstream
    return grad_a, grad_z


@dataclass
class ForwardCache:
    """Intermediates of one forward pass: inputs per block, pre-activations
    per mean-field block (None for linear blocks), and the final output.

    Arrays are per-sample vectors for :func:`network_forward` and (N, d)
    batches for :func:`network_forward_batch`.
    """

    block_inputs: list = field(default_factory=list)
    preacts: list = field(default_factory=list)
    output: np.ndarray | None = None

    @property
    def n_blocks(self) -> int:
        return len(self.block_inputs)


def network_forward(net: Network, x) -> tuple[np.ndarray, ForwardCache]:
    """Sequential composition of all blocks on a single input vector."""
    x = _check_vector(x, net.input_dim, "network input")
    cache = ForwardCache()
    z = x
    for i, block in enumerate(net.blocks):
        cache.block_inputs.append(z)
        if isinstance(block, MeanFieldLayer):
            if z.shape[0] != block.d_in:
                raise DimensionError(
                    f"expected input dim {block.d_in}, got {z.shape[0]}", block=i
                )
            s = block.theta0 @ z
            z = (net.activation.fn(s) @ block.theta1) / block.m
            cache.preacts.append(s)
        else:
            if z.shape[0] != block.cols:
                raise DimensionError(
                    f"expected input dim {block.cols}, got {z.shape[0]}", block=i
                )
            z = block.a @ z
            cache.preacts.append(None)
        if not np.all(np.isfinite(z)):
            raise NonFiniteError("non-finite block output", block=i)
    cache.output = z
    return z, cache


def network_forward_batch(net: Network, X) -> tuple[np.ndarray, ForwardCache]:
    """Forward over a batch: X is (N, input_dim), output is (N, output_dim)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.input_dim:
        raise DimensionError(
            f"batch input has shape {X.shape}, expected (N, {net.input_dim})"
        )
    if not np.all(np.isfinite(X)):
        raise NonFiniteError("batch input contains non-finite entries")
    cache = ForwardCache()
    Z = X
    for i, block in enumerate(net.blocks):
        cache.block_inputs.append(Z)
        if isinstance(block, MeanFieldLayer):
            Z, S = mf_forward(block.theta0, block.theta1, Z, net.activation)
            cache.preacts.append(S)
        else:
            Z = lin_forward(block.a, Z)
            cache.preacts.append(None)
        if not np.all(np.isfinite(Z)):
            raise NonFiniteError("non-finite block output", block=i)
    cache.output = Z
    return Z, cache


@dataclass
class GradientSet:
    """Per-block gradients mirroring the network's parameter structure.

    ``blocks[i]`` is a (grad_theta0, grad_theta1) pair for mean-field
    blocks and a single grad_a matrix for linear blocks.
    """

    blocks: list

    def __iter__(self):
        return iter(self.blocks)


def network_backward(net: Network, cache: ForwardCache, upstream) -> GradientSet:
    """Reverse traversal; accepts per-sample or batched caches.

    For batched caches upstream is (N, output_dim) and the returned
    gradients are summed over samples (scale upstream rows to get means).
    """
    if cache.n_blocks != net.n_blocks:
        raise DimensionError(
            f"cache has {cache.n_blocks} blocks, network has {net.n_blocks}"
        )
    upstream = np.asarray(upstream, dtype=np.float64)
    batched = upstream.ndim == 2
    if not np.all(np.isfinite(upstream)):
        raise NonFiniteError("upstream contains non-finite entries")
    grads: list = [None] * net.n_blocks
    U = upstream if batched else upstream[None, :]
    for i in range(net.n_blocks - 1, -1, -1):
        block = net.blocks[i]
        Z = cache.block_inputs[i]
        Zb = Z if batched else Z[None, :]
        if U.shape[1] != block.d_out:
            raise DimensionError(
                f"cotangent dim {U.shape[1]} != block output dim {block.d_out}",
                block=i,
            )
        if isinstance(block, MeanFieldLayer):
            S = cache.preacts[i]
            Sb = S if batched else S[None, :]
            g0, g1, U = mf_backward(block.theta0, block.theta1, Zb, Sb, U, net.activation)
            grads[i] = (g0, g1)
        else:
            gA, U = lin_backward(block.a, Zb, U)
            grads[i] = gA
    return GradientSet(grads)


def max_intermediate_norm(cache: ForwardCache) -> float:
    """Largest euclidean norm among block outputs (per sample for batches)."""
    vals = []
    for i in range(1, cache.n_blocks):
        z = cache.block_inputs[i]
        vals.append(np.max(np.linalg.norm(np.atleast_2d(z), axis=1)))
    z = cache.output
    vals.append(np.max(np.linalg.norm(np.atleast_2d(z), axis=1)))
    return float(max(vals))
