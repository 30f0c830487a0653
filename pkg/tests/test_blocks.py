import numpy as np
import pytest

from blockbnn import autodiff as ad
from blockbnn import blocks as bl
from blockbnn import kernels as kn
from blockbnn import skeleton as sk
from blockbnn.rngs import stream


def rb_policy(r=3, activation="relu"):
    return bl.FeaturePolicy(bl.BlockRecipe(
        features=(bl.FeatureSpec("rb", r, activation=activation),)))


def random_weights(net, seed=0):
    rng = np.random.default_rng(seed)
    return {g: rng.normal(size=(fb.in_width, fb.out_width))
            for g, fb in net.groups.items()}


class TestBuild:
    def test_chain_expansion_widths(self):
        # 4 inputs, RB(r=3) + FB(d=2), output FB(d=1): widths 4 -> 3 -> 2 -> 3 -> 1
        net = bl.build_network(sk.chain(2, input_dim=4, width=2), rb_policy(3), seed=1)
        u1, u2 = net.units[0][0], net.units[1][0]
        assert u1.feature_blocks[0].in_width == 4
        assert u1.feature_blocks[0].feature_count == 3
        assert (u1.fb.in_width, u1.fb.out_width) == (3, 2)
        assert u2.feature_blocks[0].in_width == 2
        assert (u2.fb.in_width, u2.fb.out_width) == (3, 1)

    def test_zero_feature_blocks_recipe(self):
        net = bl.build_network(sk.chain(2, input_dim=4, width=2),
                               bl.FeaturePolicy(bl.BlockRecipe(posterior="mixture")),
                               seed=0)
        assert all(not u.feature_blocks for layer in net.units for u in layer)
        assert net.units[0][0].fb.in_width == 4

    def test_two_sequential_rbs(self):
        policy = bl.FeaturePolicy(bl.BlockRecipe(
            features=(bl.FeatureSpec("rb", 5), bl.FeatureSpec("rb", 7))))
        net = bl.build_network(sk.chain(1, input_dim=3), policy, seed=0)
        unit = net.units[0][0]
        assert [b.in_width for b in unit.feature_blocks] == [3, 5]
        assert [b.feature_count for b in unit.feature_blocks] == [5, 7]
        assert unit.fb.in_width == 7

    def test_rebuild_same_seed_bit_identical(self):
        args = dict(skeleton=sk.chain(2, input_dim=4, width=2),
                    policy=rb_policy(4), seed=9)
        w1 = bl.build_network(**args).units[0][0].feature_blocks[0].weight
        w2 = bl.build_network(**args).units[0][0].feature_blocks[0].weight
        assert np.array_equal(w1, w2)

    def test_different_seed_differs(self):
        s = sk.chain(1, input_dim=4)
        w1 = bl.build_network(s, rb_policy(4), seed=0).units[0][0].feature_blocks[0].weight
        w2 = bl.build_network(s, rb_policy(4), seed=1).units[0][0].feature_blocks[0].weight
        assert not np.array_equal(w1, w2)

    def test_default_rb_scale(self):
        net = bl.build_network(sk.chain(1, input_dim=16), rb_policy(8), seed=0)
        assert net.units[0][0].feature_blocks[0].scale == pytest.approx(0.25)

    def test_ipb_requires_inputs(self):
        policy = bl.FeaturePolicy(bl.BlockRecipe(features=(
            bl.FeatureSpec("ipb", 4, kernel=kn.KernelSpec("rbf", 1.0)),)))
        with pytest.raises(bl.BuildError, match="inducing"):
            bl.build_network(sk.chain(1, input_dim=3), policy, seed=0)

    def test_ipb_built_from_propagated_inputs(self):
        policy = bl.FeaturePolicy(bl.BlockRecipe(features=(
            bl.FeatureSpec("ipb", 4, kernel=kn.KernelSpec("rbf", None)),)))
        x = np.random.default_rng(0).normal(size=(30, 3))
        net = bl.build_network(sk.chain(1, input_dim=3), policy, seed=0, inputs=x)
        blk = net.units[0][0].feature_blocks[0]
        assert blk.points.shape == (4, 3)
        assert blk.kernel.lengthscale is not None
        rebuilt = bl.build_network(sk.chain(1, input_dim=3), policy, seed=0, inputs=x)
        assert np.array_equal(blk.points, rebuilt.units[0][0].feature_blocks[0].points)

    def test_bad_bias_mode(self):
        with pytest.raises(bl.BuildError):
            bl.build_network(sk.chain(1, input_dim=3), rb_policy(), bias_mode="nope")


class TestForward:
    def test_zero_weights_give_zero_output(self):
        net = bl.build_network(sk.chain(2, input_dim=4, width=2), rb_policy(3), seed=1)
        v = {g: np.zeros((fb.in_width, fb.out_width)) for g, fb in net.groups.items()}
        out = bl.network_output(net, np.random.default_rng(0).normal(size=(6, 4)), v)
        assert np.array_equal(out, np.zeros((6, 1)))

    def test_identity_column_extracts_feature(self):
        # single FB node, identity activation: V = e_0 copies the first feature
        net = bl.build_network(sk.chain(1, input_dim=3, activation="identity"),
                               bl.FeaturePolicy(bl.BlockRecipe()), seed=0)
        v = {"l1n0": np.array([[1.0], [0.0], [0.0]])}
        x = np.random.default_rng(1).normal(size=(5, 3))
        assert np.allclose(bl.network_output(net, x, v), x[:, [0]])

    def test_against_straight_line_oracle(self):
        # independent evaluator written without the tape or block classes
        net = bl.build_network(sk.chain(2, input_dim=4, width=2), rb_policy(3), seed=7)
        v = random_weights(net, seed=3)
        x = np.ones((1, 4))
        w1 = net.units[0][0].feature_blocks[0].weight
        w2 = net.units[1][0].feature_blocks[0].weight
        phi1 = np.maximum(x @ w1.T, 0.0) / np.sqrt(3)
        f1 = phi1 @ v["l1n0"]
        phi2 = np.maximum(np.maximum(f1, 0.0) @ w2.T, 0.0) / np.sqrt(3)
        want = phi2 @ v["l2n0"]
        assert np.allclose(bl.network_output(net, x, v), want, atol=1e-12)

    def test_forward_is_deterministic(self):
        net = bl.build_network(sk.chain(2, input_dim=4, width=2), rb_policy(3), seed=7)
        v = random_weights(net)
        x = np.random.default_rng(2).normal(size=(5, 4))
        a = bl.network_output(net, x, v)
        b = bl.network_output(net, x, v)
        assert np.array_equal(a, b)

    def test_weight_shape_mismatch(self):
        net = bl.build_network(sk.chain(1, input_dim=3), rb_policy(4), seed=0)
        with pytest.raises(ad.ShapeMismatch, match="l1n0"):
            bl.network_output(net, np.ones((2, 3)), {"l1n0": np.ones((5, 1))})

    def test_additive_output_is_branch_sum(self):
        s = sk.additive(input_dim=6, k=3, groups=[(0, 1), (2, 3), (4, 5)],
                        hidden=(2, 3))
        net = bl.build_network(s, bl.FeaturePolicy(bl.BlockRecipe()), seed=4)
        v = random_weights(net, seed=5)
        x = np.random.default_rng(6).normal(size=(7, 6))
        total = sum(ad.value_of(bl.branch_forward(net, x, v, j)) for j in range(3))
        assert np.allclose(total, bl.network_output(net, x, v), atol=1e-12)

    def test_branch_sum_with_bias_column(self):
        s = sk.additive(input_dim=4, k=2, hidden=(2, 3))
        net = bl.build_network(s, bl.FeaturePolicy(bl.BlockRecipe()), seed=4,
                               bias_mode="trainable-in-fb")
        v = random_weights(net, seed=5)
        x = np.random.default_rng(6).normal(size=(7, 4))
        total = sum(ad.value_of(bl.branch_forward(net, x, v, j)) for j in range(2))
        bias_term = v[net.units[-1][0].fb.group][-1, 0]
        assert np.allclose(total + bias_term, bl.network_output(net, x, v), atol=1e-12)

    def test_branch_count_rejects_chain(self):
        net = bl.build_network(sk.chain(2, input_dim=4, width=2), rb_policy(), seed=0)
        with pytest.raises(bl.BuildError):
            bl.additive_branch_count(net)


class TestInducingPointBlock:
    def kernel_block(self, kind="rbf", ell=1.0, r=4, d=3, seed=0):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(r, d))
        return bl.make_inducing_point_block(kn.KernelSpec(kind, ell), z), z

    def test_features_at_inducing_points_give_sqrt(self):
        blk, z = self.kernel_block()
        feats = bl.ipb_features(blk, z)
        want = ad.sqrt_spd(blk.kernel.gram(z, z))
        assert np.allclose(feats, want, atol=1e-8)

    def test_scalar_linear_kernel(self):
        blk = bl.make_inducing_point_block(kn.KernelSpec("linear", None),
                                           np.array([[2.0]]))
        assert bl.ipb_features(blk, np.array([[3.0]]))[0, 0] == pytest.approx(3.0)

    def test_nystrom_product_identity(self):
        rng = np.random.default_rng(3)
        blk, z = self.kernel_block(seed=3)
        x = rng.normal(size=(6, 3))
        feats = bl.ipb_features(blk, x)
        kxz = blk.kernel.gram(x, z)
        kzz = blk.kernel.gram(z, z)
        want = kxz @ np.linalg.solve(kzz, kxz.T)
        assert np.allclose(feats @ feats.T, want, atol=1e-8)

    def test_traced_rbf_matches_eager(self):
        blk, _ = self.kernel_block()
        x = np.random.default_rng(5).normal(size=(4, 3))
        tape = ad.Tape()
        traced = blk.feature_matrix(tape.leaf(x))
        assert np.allclose(traced.value, bl.ipb_features(blk, x), atol=1e-12)

    def test_arccos_kernel_not_traceable(self):
        rng = np.random.default_rng(4)
        z = rng.normal(size=(3, 2))
        blk = bl.make_inducing_point_block(kn.KernelSpec("arccos1", None), z)
        tape = ad.Tape()
        with pytest.raises(NotImplementedError):
            blk.feature_matrix(tape.leaf(rng.normal(size=(2, 2))))


def test_empirical_kernel_consistency_with_features():
    # the Gram of the feature map is exactly the empirical kernel
    net = bl.build_network(sk.chain(1, input_dim=5), rb_policy(16, "tanh"), seed=2)
    rb = net.units[0][0].feature_blocks[0]
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=5), rng.normal(size=5)
    fa = rb.feature_matrix(a.reshape(1, -1))
    fb = rb.feature_matrix(b.reshape(1, -1))
    assert kn.empirical_kernel(rb, a, b) == pytest.approx(float(fa @ fb.T), abs=1e-14)


class TestSerialization:
    def make_net(self):
        x = np.random.default_rng(0).normal(size=(40, 4))
        policy = bl.FeaturePolicy(
            rb_policy(3).default,
            overrides={2: bl.BlockRecipe(features=(
                bl.FeatureSpec("ipb", 4, kernel=kn.KernelSpec("rbf", None)),),
                posterior="gaussian")})
        return bl.build_network(sk.chain(2, input_dim=4, width=2), policy,
                                seed=11, inputs=x)

    def test_roundtrip_reproduces_tensors_and_outputs(self):
        net = self.make_net()
        cfg, tensors = bl.net_config(net), bl.net_tensors(net)
        rebuilt = bl.rebuild_network(cfg, tensors)
        v = random_weights(net, seed=1)
        x = np.random.default_rng(2).normal(size=(6, 4))
        assert np.array_equal(bl.network_output(net, x, v),
                              bl.network_output(rebuilt, x, v))

    def test_checksum_mismatch_detected(self):
        net = self.make_net()
        cfg, tensors = bl.net_config(net), bl.net_tensors(net)
        tensors = dict(tensors)
        key = "l1.n0.f0.weight"
        tensors[key] = tensors[key] + 1.0
        with pytest.raises(ValueError, match="checksum"):
            bl.rebuild_network(cfg, tensors)


def test_random_in_rb_bias_mode():
    net = bl.build_network(sk.chain(1, input_dim=3), rb_policy(4), seed=0,
                           bias_mode="random-in-rb")
    blk = net.units[0][0].feature_blocks[0]
    assert blk.offset is not None and blk.offset.shape == (4,)
    x = np.zeros((1, 3))
    feats = blk.feature_matrix(x)
    want = np.maximum(blk.offset, 0.0) / 2.0
    assert np.allclose(feats, want.reshape(1, -1), atol=1e-14)


def test_trainable_bias_adds_column():
    net = bl.build_network(sk.chain(1, input_dim=3), bl.FeaturePolicy(bl.BlockRecipe()),
                           seed=0, bias_mode="trainable-in-fb")
    fb = net.units[0][0].fb
    assert fb.bias and fb.in_width == 4
    v = np.array([[0.0], [0.0], [0.0], [2.5]])
    out = bl.network_output(net, np.random.default_rng(0).normal(size=(5, 3)),
                            {"l1n0": v})
    assert np.allclose(out, 2.5)
