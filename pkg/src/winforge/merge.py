"""Exact fusion passes removing inserted linear transformations.

All rewrites preserve the computed function exactly up to one extra
floating-point reassociation:

  fuse:        second(first(z)) = (A2 A1) z
  absorb_pre:  layer(A z)       = layer' (z)  with theta0_j' = A^T theta0_j
  absorb_post: A layer(z)       = layer''(z)  with theta1_j'' = A theta1_j
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import BlockPatternError, DimensionError
from .net import LinearMap, MeanFieldLayer, Network


@dataclass
class MergePlan:
    """Audit record of the rewrite steps, indices in pre-merge coordinates."""

    steps: list = field(default_factory=list)

    def add(self, op: str, **indices) -> None:
        self.steps.append({"op": op, **indices})

    def to_json(self) -> str:
        return json.dumps({"steps": self.steps}, sort_keys=True)


def fuse_linear(first: LinearMap, second: LinearMap) -> LinearMap:
    """Single linear map computing second(first(z))."""
    if second.cols != first.rows:
        raise DimensionError(
            f"cannot fuse {first.rows}x{first.cols} into {second.rows}x{second.cols}"
        )
    return LinearMap(second.a @ first.a)


def absorb_pre(lin: LinearMap, layer: MeanFieldLayer) -> MeanFieldLayer:
    """Fold a preceding linear map into the layer's input weights.

    Uses <theta0, A z> = <A^T theta0, z>; the new layer has d_in = lin.cols.
    """
    if lin.rows != layer.d_in:
        raise DimensionError(
            f"linear output dim {lin.rows} != layer input dim {layer.d_in}"
        )
    return MeanFieldLayer(layer.theta0 @ lin.a, layer.theta1)


def absorb_post(layer: MeanFieldLayer, lin: LinearMap) -> MeanFieldLayer:
    """Fold a following linear map into the layer's output weights."""
    if lin.cols != layer.d_out:
        raise DimensionError(
            f"linear input dim {lin.cols} != layer output dim {layer.d_out}"
        )
    return MeanFieldLayer(layer.theta0, layer.theta1 @ lin.a.T)


def merge_pass(net: Network) -> tuple[Network, MergePlan]:
    """Collapse every inserted (up, down) linear pair into the next layer.

    Expects the block pattern produced by pair insertion: a mean-field
    layer, then zero or more (linear, linear, mean-field) groups. Each pair
    is fused to a square map and absorbed into the following layer's input
    weights, restoring the thin architecture. Networks with no linear
    blocks pass through untouched (idempotence).
    """
    plan = MergePlan()
    blocks = net.blocks
    if not isinstance(blocks[0], MeanFieldLayer):
        raise BlockPatternError("expected a mean-field layer first", position=0)
    merged = [blocks[0]]
    i = 1
    while i < len(blocks):
        b = blocks[i]
        if isinstance(b, MeanFieldLayer):
            merged.append(b)
            i += 1
            continue
        if i + 2 >= len(blocks):
            raise BlockPatternError(
                "dangling linear pair with no following layer", position=i
            )
        down = blocks[i + 1]
        layer = blocks[i + 2]
        if not isinstance(down, LinearMap):
            raise BlockPatternError("expected the pair's second linear map", position=i + 1)
        if not isinstance(layer, MeanFieldLayer):
            raise BlockPatternError("expected a mean-field layer after the pair", position=i + 2)
        fused = fuse_linear(b, down)
        plan.add("fuse", first=i, second=i + 1)
        merged.append(absorb_pre(fused, layer))
        plan.add("absorb_pre", linear=i, layer=i + 2)
        i += 3
    result = Network(merged, net.activation)
    return result, plan


def batch_relative_deviation(ya: np.ndarray, yb: np.ndarray) -> float:
    """Sup-norm deviation relative to the larger batch scale.

    The equivalence contract is "equal up to reassociation", which is
    meaningful relative to the magnitude of the outputs, not per-entry
    (individual outputs may cancel to ~0).
    """
    ya = np.asarray(ya, dtype=np.float64)
    yb = np.asarray(yb, dtype=np.float64)
    scale = max(float(np.max(np.abs(ya))), float(np.max(np.abs(yb))))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(ya - yb))) / scale
