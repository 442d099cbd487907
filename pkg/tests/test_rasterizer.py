import numpy as np
import pytest

from semsplat.core import (CameraIntrinsics, CameraPose, Codebook, GaussianField,
                           decode_feature)
from semsplat.errors import EmptySceneError, InvalidInputError
from semsplat.rasterizer import (feature_gradients, render, render_channels_grid,
                                 render_features_dense, render_features_grid)
from semsplat.supervision import GridSpec, SupervisionTarget, masked_semantic_loss

from .oracles import naive_render, random_scene

RNG = np.random.default_rng(11)


def big_gaussian(mu, color, opacity, K=2):
    return dict(mu=[mu], quat=[[1.0, 0, 0, 0]], scale=[[0.5, 0.5, 0.5]],
                opacity=[opacity], color=[color], logits=[[0.0] * K])


def centered_intrinsics(n=9, fov=60.0):
    # odd resolution puts the principal point on an integer pixel
    return CameraIntrinsics.from_fov(n, n, fov)


class TestBlendExamples:
    def test_single_opaque_gaussian(self):
        intr = centered_intrinsics()
        field = GaussianField(**big_gaussian([0.0, 0.0, 2.0], [0.3, 0.6, 0.9], 1.0))
        out = render(field, CameraPose.identity(), intr)
        cu = int(intr.cx)
        assert np.allclose(out.color[:, cu, cu], [0.3, 0.6, 0.9], atol=1e-12)
        assert out.alpha[cu, cu] == 1.0
        assert np.isclose(out.depth[cu, cu], 2.0)

    def test_two_coincident_half_alpha(self):
        intr = centered_intrinsics()
        c1, c2 = np.array([1.0, 0, 0]), np.array([0.0, 0, 1.0])
        field = GaussianField(
            mu=[[0.0, 0, 1.0], [0.0, 0, 2.0]],
            quat=[[1.0, 0, 0, 0]] * 2,
            scale=[[0.5, 0.5, 0.5]] * 2,
            opacity=[0.5, 0.5],
            color=[c1, c2],
            logits=[[0.0, 0.0]] * 2,
        )
        out = render(field, CameraPose.identity(), intr)
        cu = int(intr.cx)
        assert np.allclose(out.color[:, cu, cu], 0.5 * c1 + 0.25 * c2, atol=1e-12)
        assert np.isclose(out.alpha[cu, cu], 0.75, atol=1e-12)

    def test_empty_field_errors(self):
        intr = centered_intrinsics()
        empty = GaussianField(mu=np.zeros((0, 3)), quat=np.zeros((0, 4)),
                              scale=np.zeros((0, 3)), opacity=np.zeros(0),
                              color=np.zeros((0, 3)), logits=np.zeros((0, 2)))
        with pytest.raises(EmptySceneError):
            render(empty, CameraPose.identity(), intr)


class TestOracleEquivalence:
    def test_color_depth_alpha_match_naive_oracle(self):
        for trial in range(8):
            rng = np.random.default_rng(100 + trial)
            field, _, pose, intr = random_scene(rng, n=int(rng.integers(2, 12)))
            out = render(field, pose, intr)
            o_col, o_depth, o_alpha = naive_render(field, pose, intr)
            assert np.max(np.abs(out.color - o_col)) < 1e-6
            assert np.max(np.abs(out.depth - o_depth)) < 1e-6
            assert np.max(np.abs(out.alpha - o_alpha)) < 1e-6

    def test_features_match_naive_oracle(self):
        for trial in range(5):
            rng = np.random.default_rng(200 + trial)
            field, cb, pose, intr = random_scene(rng, n=6)
            dense = render_features_dense(field, cb, pose, intr)
            payload = decode_feature(field.logits, cb)
            o_feat, _, _ = naive_render(field, pose, intr, payload=payload)
            assert np.max(np.abs(dense - o_feat)) < 1e-6

    def test_storage_order_invariance(self):
        rng = np.random.default_rng(5)
        field, _, pose, intr = random_scene(rng, n=10)
        out1 = render(field, pose, intr)
        perm = rng.permutation(10)
        shuffled = GaussianField(mu=field.mu[perm], quat=field.quat[perm],
                                 scale=field.scale[perm], opacity=field.opacity[perm],
                                 color=field.color[perm], logits=field.logits[perm])
        out2 = render(shuffled, pose, intr)
        assert np.max(np.abs(out1.color - out2.color)) < 1e-9
        assert np.max(np.abs(out1.depth - out2.depth)) < 1e-9

    def test_alpha_conservation(self):
        # accumulated alpha == 1 - prod(1 - alpha') on non-terminated pixels
        rng = np.random.default_rng(9)
        field, _, pose, intr = random_scene(rng, n=8)
        out = render(field, pose, intr)
        _, _, o_alpha = naive_render(field, pose, intr)
        assert np.max(np.abs(out.alpha - o_alpha)) < 1e-6


class TestGridPath:
    def test_stride_one_identical_to_dense(self):
        rng = np.random.default_rng(31)
        field, cb, pose, intr = random_scene(rng, n=8)
        dense = render_features_dense(field, cb, pose, intr)
        grid = render_features_grid(field, cb, pose, intr,
                                    GridSpec(H=intr.height, W=intr.width, s=1))
        assert np.array_equal(dense, grid.data)

    @pytest.mark.parametrize("s", [2, 3, 4])
    def test_grid_equals_subsampled_dense(self, s):
        rng = np.random.default_rng(40 + s)
        field, cb, pose, intr = random_scene(rng, n=10)
        dense = render_features_dense(field, cb, pose, intr)
        for o_h in range(s):
            for o_w in range(s):
                g = GridSpec(H=intr.height, W=intr.width, s=s, o_h=o_h, o_w=o_w)
                out = render_features_grid(field, cb, pose, intr, g)
                assert np.max(np.abs(out.data - dense[:, o_h::s, o_w::s])) < 1e-7

    def test_empty_grid_returns_empty_map(self):
        rng = np.random.default_rng(50)
        field, cb, pose, _ = random_scene(rng, n=3)
        intr = CameraIntrinsics.from_fov(3, 8)
        out = render_features_grid(field, cb, pose, intr,
                                   GridSpec(H=3, W=8, s=5, o_h=4, o_w=0))
        assert out.data.shape == (cb.D, 0, 2)
        assert out.blend_steps == 0

    def test_work_reduction(self):
        # >= 50% coverage scene: stride-4 blend steps within 10% of the 1/16 ideal
        rng = np.random.default_rng(60)
        field, cb, pose, intr = random_scene(
            rng, n=12, scale_range=(0.4, 0.9), height=64, width=64)
        dense = render_features_grid(field, cb, pose, intr,
                                     GridSpec(H=64, W=64, s=1))
        cover = render(field, pose, intr)
        assert (cover.alpha > 0).mean() >= 0.5
        g4 = render_features_grid(field, cb, pose, intr, GridSpec(H=64, W=64, s=4))
        assert g4.blend_steps <= (1 / 16) * 1.10 * dense.blend_steps


class TestFeatureGradients:
    def loss_for_logits(self, field, cb, pose, intr, grid, target, logits):
        pred = render_features_grid(field.with_logits(logits), cb, pose, intr, grid)
        loss, _ = masked_semantic_loss(pred.data, target)
        return loss

    def test_zero_upstream(self):
        rng = np.random.default_rng(70)
        field, cb, pose, intr = random_scene(rng, n=4)
        grid = GridSpec(H=intr.height, W=intr.width, s=2)
        grads = feature_gradients(field, cb, pose, intr, grid,
                                  np.zeros((cb.D, grid.H_s, grid.W_s)))
        assert not grads.logit_grads.any()
        assert not grads.feature_grads.any()

    def test_shape_mismatch(self):
        rng = np.random.default_rng(71)
        field, cb, pose, intr = random_scene(rng, n=3)
        grid = GridSpec(H=intr.height, W=intr.width, s=2)
        with pytest.raises(InvalidInputError):
            feature_gradients(field, cb, pose, intr, grid,
                              np.zeros((cb.D, grid.H_s + 1, grid.W_s)))

    @pytest.mark.parametrize("n,seed", [(1, 80), (5, 81), (7, 82)])
    def test_matches_finite_differences(self, n, seed):
        rng = np.random.default_rng(seed)
        field, cb, pose, intr = random_scene(rng, n=n, height=8, width=8)
        grid = GridSpec(H=8, W=8, s=2, o_h=1, o_w=0)
        target = SupervisionTarget(
            G_star=rng.normal(size=(cb.D, grid.H_s, grid.W_s)),
            V=(rng.uniform(size=(1, grid.H_s, grid.W_s)) > 0.25).astype(float))
        pred = render_features_grid(field, cb, pose, intr, grid)
        _, cot = masked_semantic_loss(pred.data, target)
        grads = feature_gradients(field, cb, pose, intr, grid, cot)

        step = 1e-5
        fd = np.zeros_like(field.logits)
        for i in range(n):
            for k in range(cb.K):
                lp, lm = field.logits.copy(), field.logits.copy()
                lp[i, k] += step
                lm[i, k] -= step
                fd[i, k] = (self.loss_for_logits(field, cb, pose, intr, grid, target, lp)
                            - self.loss_for_logits(field, cb, pose, intr, grid, target, lm)) / (2 * step)
        scale = np.maximum(np.abs(fd), 1e-3)
        assert np.max(np.abs(fd - grads.logit_grads) / scale) < 1e-3

    def test_noncontributing_gaussian_gets_zero(self):
        intr = centered_intrinsics()
        K = 3
        field = GaussianField(
            mu=[[0.0, 0, 2.0], [50.0, 50.0, 2.0]],    # second far off-screen
            quat=[[1.0, 0, 0, 0]] * 2, scale=[[0.3, 0.3, 0.3]] * 2,
            opacity=[0.9, 0.9], color=[[1.0, 0, 0]] * 2,
            logits=RNG.normal(size=(2, K)))
        cb = Codebook(E=RNG.normal(size=(K, 4)), N=np.ones(K),
                      M=RNG.normal(size=(K, 4)), lam=0.9, epsilon=1e-5)
        grid = GridSpec(H=intr.height, W=intr.width, s=1)
        up = RNG.normal(size=(4, grid.H_s, grid.W_s))
        grads = feature_gradients(field, cb, CameraPose.identity(), intr, grid, up)
        assert grads.logit_grads[0].any()
        assert not grads.logit_grads[1].any()
