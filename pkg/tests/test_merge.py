import json

import numpy as np
import pytest

from winforge import (
    LinearMap,
    MeanFieldLayer,
    Network,
    absorb_post,
    absorb_pre,
    fuse_linear,
    insert_linear_pairs,
    merge_pass,
    network_forward_batch,
)
from winforge.errors import BlockPatternError, DimensionError
from winforge.merge import batch_relative_deviation
from winforge.net import layer_forward, linear_forward

from helpers import matmul_loops, small_net


class TestFuseLinear:
    def test_identity_times_identity(self):
        out = fuse_linear(LinearMap(np.eye(3)), LinearMap(np.eye(3)))
        assert np.array_equal(out.a, np.eye(3))

    def test_scalars(self):
        out = fuse_linear(LinearMap([[2.0]]), LinearMap([[3.0]]))
        assert out.a[0, 0] == 6.0

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(1)
        first = rng.uniform(-1, 1, (3, 2))   # 2 -> 3
        second = rng.uniform(-1, 1, (2, 3))  # 3 -> 2
        fused = fuse_linear(LinearMap(first), LinearMap(second))
        np.testing.assert_allclose(fused.a, matmul_loops(second, first), rtol=1e-15)

    def test_composition_semantics(self):
        rng = np.random.default_rng(2)
        first = LinearMap(rng.uniform(-1, 1, (4, 3)))
        second = LinearMap(rng.uniform(-1, 1, (2, 4)))
        fused = fuse_linear(first, second)
        for _ in range(10):
            z = rng.uniform(-1, 1, 3)
            want = linear_forward(second, linear_forward(first, z))
            got = linear_forward(fused, z)
            np.testing.assert_allclose(got, want, atol=1e-14)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            fuse_linear(LinearMap(np.eye(3)), LinearMap(np.ones((2, 4))))


class TestAbsorb:
    def _layer(self, seed, m=5, d_in=3, d_out=2):
        rng = np.random.default_rng(seed)
        return MeanFieldLayer(rng.uniform(-1, 1, (m, d_in)), rng.uniform(-1, 1, (m, d_out)))

    def test_absorb_pre_identity(self):
        layer = self._layer(1)
        out = absorb_pre(LinearMap(np.eye(3)), layer)
        assert np.array_equal(out.theta0, layer.theta0)
        assert np.array_equal(out.theta1, layer.theta1)

    def test_absorb_pre_scalar_pull_through(self):
        layer = self._layer(2)
        out = absorb_pre(LinearMap(2.0 * np.eye(3)), layer)
        np.testing.assert_allclose(out.theta0, 2.0 * layer.theta0, rtol=1e-15)

    def test_absorb_pre_equality_on_random_inputs(self):
        rng = np.random.default_rng(3)
        layer = self._layer(3)
        lin = LinearMap(rng.uniform(-1, 1, (3, 4)))
        merged = absorb_pre(lin, layer)
        for _ in range(100):
            z = rng.uniform(-1, 1, 4)
            want = layer_forward(layer, linear_forward(lin, z), "tanh")
            got = layer_forward(merged, z, "tanh")
            assert np.max(np.abs(want - got)) <= 1e-12

    def test_absorb_post_identity(self):
        layer = self._layer(4)
        out = absorb_post(layer, LinearMap(np.eye(2)))
        assert np.array_equal(out.theta1, layer.theta1)

    def test_absorb_post_zero(self):
        layer = self._layer(5)
        out = absorb_post(layer, LinearMap(np.zeros((3, 2))))
        assert np.all(out.theta1 == 0.0)
        z = np.zeros(3)
        assert np.all(layer_forward(out, z, "tanh") == 0.0)

    def test_absorb_post_equality_on_random_inputs(self):
        rng = np.random.default_rng(6)
        layer = self._layer(6)
        lin = LinearMap(rng.uniform(-1, 1, (4, 2)))
        merged = absorb_post(layer, lin)
        for _ in range(100):
            z = rng.uniform(-1, 1, 3)
            want = linear_forward(lin, layer_forward(layer, z, "tanh"))
            got = layer_forward(merged, z, "tanh")
            assert np.max(np.abs(want - got)) <= 1e-12

    def test_dim_mismatches(self):
        layer = self._layer(7)
        with pytest.raises(DimensionError):
            absorb_pre(LinearMap(np.eye(4)), layer)
        with pytest.raises(DimensionError):
            absorb_post(layer, LinearMap(np.eye(4)))


class TestMergePass:
    def test_identity_pairs_restore_thin_parameters(self):
        thin = small_net(10, n_blocks=3, d=4, m=5)
        sbar = insert_linear_pairs(thin, 4, "identity")
        merged, plan = merge_pass(sbar)
        assert merged.n_blocks == 3
        for got, want in zip(merged.blocks, thin.blocks):
            np.testing.assert_array_equal(got.theta0, want.theta0)
            np.testing.assert_array_equal(got.theta1, want.theta1)
        assert len(plan.steps) == 4

    def test_single_layer_no_op(self):
        thin = small_net(11, n_blocks=1)
        merged, plan = merge_pass(thin)
        assert merged.n_blocks == 1
        assert plan.steps == []

    def test_idempotent(self):
        thin = small_net(12, n_blocks=4)
        sbar = insert_linear_pairs(thin, 7, "identity")
        merged, _ = merge_pass(sbar)
        again, plan = merge_pass(merged)
        assert plan.steps == []
        for a, b in zip(again.blocks, merged.blocks):
            assert np.array_equal(a.theta0, b.theta0)
            assert np.array_equal(a.theta1, b.theta1)

    @pytest.mark.parametrize("seed", range(5))
    def test_equivalence_on_random_networks(self, seed):
        rng = np.random.default_rng(seed)
        thin = small_net(seed, n_blocks=3, d=4, m=6)
        sbar = insert_linear_pairs(thin, 6, "identity")
        # perturb the pairs so the merge is nontrivial
        blocks = []
        for b in sbar.blocks:
            if isinstance(b, LinearMap):
                blocks.append(LinearMap(b.a + 0.3 * rng.uniform(-1, 1, b.a.shape)))
            else:
                blocks.append(b)
        sbar = Network(blocks, "tanh")
        merged, _ = merge_pass(sbar)
        assert merged.n_blocks == 3
        X = rng.uniform(-1, 1, (1000, 4))
        ya, _ = network_forward_batch(sbar, X)
        yb, _ = network_forward_batch(merged, X)
        assert batch_relative_deviation(ya, yb) <= 1e-10

    def test_unexpected_pattern_errors_with_position(self):
        net = Network([LinearMap(np.eye(3)), MeanFieldLayer(np.ones((2, 3)), np.ones((2, 1)))], "tanh")
        with pytest.raises(BlockPatternError) as exc:
            merge_pass(net)
        assert exc.value.position == 0
        thin = small_net(14, n_blocks=2)
        dangling = Network(
            thin.blocks[:1] + [LinearMap(np.eye(4))] + [LinearMap(np.eye(4))], "tanh"
        )
        with pytest.raises(BlockPatternError):
            merge_pass(dangling)

    def test_plan_serializes_as_json(self):
        thin = small_net(15, n_blocks=3)
        sbar = insert_linear_pairs(thin, 5, "identity")
        _, plan = merge_pass(sbar)
        doc = json.loads(plan.to_json())
        assert {s["op"] for s in doc["steps"]} == {"fuse", "absorb_pre"}
