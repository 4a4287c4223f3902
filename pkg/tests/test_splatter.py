import math

import numpy as np
import pytest
import torch

from sparsegen.gaussians import Gaussian3D, GaussianSet
from sparsegen.geometry import CameraPose
from sparsegen.splatter import (
    gradient_check,
    project_gaussian,
    project_gaussians,
    read_png,
    render,
    write_png,
)

from oracle_render import oracle_render


def frontal_pose(f=60.0, c=16.0, **kw):
    d = dict(fx=f, fy=f, cx=c, cy=c, R=torch.eye(3), t=torch.zeros(3),
             near=0.5, far=10.0)
    d.update(kw)
    return CameraPose(**d)


def random_scene(rng: np.random.Generator, n: int, dtype=torch.float64) -> GaussianSet:
    """Primitives in the frustum of frontal_pose(), safe margins for FD checks."""
    rot = rng.standard_normal((n, 4))
    rot /= np.linalg.norm(rot, axis=-1, keepdims=True)
    z = rng.uniform(1.5, 4.0, n)
    xy = rng.uniform(-0.35, 0.35, (n, 2)) * z[:, None]
    return GaussianSet(
        mu=torch.tensor(np.concatenate([xy, z[:, None]], -1), dtype=dtype),
        scale=torch.tensor(rng.uniform(0.02, 0.12, (n, 3)), dtype=dtype),
        rot=torch.tensor(rot, dtype=dtype),
        color=torch.tensor(rng.uniform(0, 1, (n, 3)), dtype=dtype),
        opacity=torch.tensor(rng.uniform(0.1, 0.9, n), dtype=dtype),
    )


def single(mu, scale, color, opacity, dtype=torch.float64):
    return GaussianSet(
        mu=torch.tensor([mu], dtype=dtype),
        scale=torch.tensor([scale], dtype=dtype),
        rot=torch.tensor([[1.0, 0, 0, 0]], dtype=dtype),
        color=torch.tensor([color], dtype=dtype),
        opacity=torch.tensor([opacity], dtype=dtype),
    )


class TestProjection:
    def test_on_axis_closed_form(self):
        f, z, s = 50.0, 2.0, 0.05
        g = Gaussian3D([0, 0, z], [s, s, s], [1, 0, 0, 0], [1, 1, 1], 1.0)
        sp = project_gaussian(g, frontal_pose(f=f))
        assert sp is not None
        expected = (f * s / z) ** 2 * torch.eye(2)
        assert torch.allclose(sp.Sigma_img.float(), expected, atol=1e-5)
        assert torch.allclose(sp.x.float(), torch.tensor([16.0, 16.0]))

    def test_behind_camera_culled(self):
        g = Gaussian3D([0, 0, -1.0], [0.1] * 3, [1, 0, 0, 0], [1, 1, 1], 1.0)
        assert project_gaussian(g, frontal_pose()) is None

    def test_scale_sweep_quadratic(self):
        eigs = []
        for s in (0.1, 0.05, 0.025):
            g = Gaussian3D([0, 0, 2.0], [s, s, s], [1, 0, 0, 0], [1, 1, 1], 1.0)
            sp = project_gaussian(g, frontal_pose())
            eigs.append(torch.linalg.eigvalsh(sp.Sigma_img).max().item())
        assert eigs[0] / eigs[1] == pytest.approx(4.0, rel=1e-6)
        assert eigs[1] / eigs[2] == pytest.approx(4.0, rel=1e-6)

    def test_batch_mask(self):
        rng = np.random.default_rng(0)
        gs = random_scene(rng, 8)
        gs.mu[3, 2] = -2.0
        splats, keep = project_gaussians(gs, frontal_pose())
        assert keep.tolist() == [True, True, True, False, True, True, True, True]
        assert splats.x.shape == (8, 2)


class TestRender:
    def test_empty_scene(self):
        out = render(GaussianSet.from_list([]), frontal_pose(), 8, 8)
        assert torch.equal(out.rgb, torch.zeros(8, 8, 3))
        assert torch.equal(out.accum_alpha, torch.zeros(8, 8))

    def test_single_gaussian_full_opacity_at_mean(self):
        # principal point at the center of pixel (16, 16)
        pose = frontal_pose(c=16.5)
        gs = single([0, 0, 2.0], [0.05] * 3, [0.3, 0.7, 0.2], 1.0)
        out = render(gs, pose, 32, 32)
        assert torch.allclose(out.rgb[16, 16],
                              torch.tensor([0.3, 0.7, 0.2], dtype=torch.float64),
                              atol=1e-5)

    def test_two_gaussian_overlap_hand_value(self):
        pose = frontal_pose(c=16.5)
        gs = GaussianSet(
            mu=torch.tensor([[0, 0, 1.5], [0, 0, 3.0]], dtype=torch.float64),
            scale=torch.full((2, 3), 0.05, dtype=torch.float64),
            rot=torch.tensor([[1.0, 0, 0, 0]] * 2, dtype=torch.float64),
            color=torch.tensor([[1.0, 0, 0], [0, 1.0, 0]], dtype=torch.float64),
            opacity=torch.tensor([0.6, 1.0], dtype=torch.float64),
        )
        out = render(gs, pose, 32, 32)
        expected = torch.tensor([0.6, 0.4, 0.0], dtype=torch.float64)
        assert (out.rgb[16, 16] - expected).abs().max() < 1e-6

    def test_weight_budget_random_scenes(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            gs = random_scene(rng, 24)
            gs.opacity = torch.ones_like(gs.opacity)  # worst case
            out = render(gs, frontal_pose(), 32, 32)
            assert out.accum_alpha.min() >= 0.0
            assert out.accum_alpha.max() <= 1.0
            # per-channel radiance never exceeds total compositing weight
            assert (out.rgb.max(dim=-1).values <= out.accum_alpha + 1e-9).all()

    def test_order_invariance(self):
        rng = np.random.default_rng(7)
        gs = random_scene(rng, 16)
        out1 = render(gs, frontal_pose(), 24, 24)
        perm = torch.randperm(16, generator=torch.Generator().manual_seed(1))
        gs2 = GaussianSet(gs.mu[perm], gs.scale[perm], gs.rot[perm],
                          gs.color[perm], gs.opacity[perm])
        out2 = render(gs2, frontal_pose(), 24, 24)
        assert (out1.rgb - out2.rgb).abs().max() < 1e-6

    def test_csr_matches_brute_bitwise(self):
        rng = np.random.default_rng(8)
        for dtype in (torch.float64, torch.float32):
            gs = random_scene(rng, 20, dtype=dtype)
            a = render(gs, frontal_pose(), 32, 32, path="csr")
            b = render(gs, frontal_pose(), 32, 32, path="brute")
            assert torch.equal(a.rgb, b.rgb)
            assert torch.equal(a.accum_alpha, b.accum_alpha)

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(9)
        for _ in range(5):
            gs = random_scene(rng, 24)
            # push some off-image to exercise the footprint cull
            gs.mu[:4, 0] = gs.mu[:4, 0] + 3.0
            out = render(gs, frontal_pose(), 32, 32)
            ref_rgb, ref_acc = oracle_render(gs, frontal_pose(), 32, 32)
            assert (out.rgb - ref_rgb).abs().max() < 1e-9
            assert (out.accum_alpha - ref_acc).abs().max() < 1e-9

    def test_small_alpha_linearity(self):
        pose = frontal_pose(c=16.5)
        base = 1e-4
        v1 = render(single([0, 0, 2.0], [0.05] * 3, [1, 1, 1], base), pose, 32, 32)
        v2 = render(single([0, 0, 2.0], [0.05] * 3, [1, 1, 1], 2 * base), pose, 32, 32)
        r1 = v1.rgb[16, 16, 0].item()
        r2 = v2.rgb[16, 16, 0].item()
        assert r2 / r1 == pytest.approx(2.0, rel=1e-3)
        # first-order agreement with the analytic derivative at alpha -> 0
        gs = single([0, 0, 2.0], [0.05] * 3, [1, 1, 1], base)
        gs.opacity.requires_grad_(True)
        out = render(gs, pose, 32, 32)
        out.rgb[16, 16, 0].backward()
        assert gs.opacity.grad[0].item() == pytest.approx(r1 / base, rel=1e-3)

    def test_degenerate_covariance_skipped(self):
        gs = GaussianSet(
            mu=torch.tensor([[0, 0, 1.0]], dtype=torch.float64),
            scale=torch.tensor([[80.0, 1e-6, 1e-6]], dtype=torch.float64),
            rot=torch.tensor([[1.0, 0, 0, 0]], dtype=torch.float64),
            color=torch.ones(1, 3, dtype=torch.float64),
            opacity=torch.ones(1, dtype=torch.float64),
        )
        out = render(gs, frontal_pose(f=100.0), 16, 16)
        assert out.n_skipped_degenerate == 1
        assert out.rgb.abs().max() == 0

    def test_float32_training_path_grads(self):
        rng = np.random.default_rng(10)
        gs = random_scene(rng, 12, dtype=torch.float32)
        for t in (gs.mu, gs.scale, gs.rot, gs.color, gs.opacity):
            t.requires_grad_(True)
        out = render(gs, frontal_pose(), 24, 24)
        loss = out.rgb.sum() + out.accum_alpha.sum()
        loss.backward()
        for t in (gs.mu, gs.scale, gs.rot, gs.color, gs.opacity):
            assert t.grad is not None
            assert torch.isfinite(t.grad).all()


class TestGradientCheck:
    def test_color_gradient_linear(self):
        gs = single([0, 0, 2.0], [0.06] * 3, [0.5, 0.5, 0.5], 0.7)
        report = gradient_check(gs, frontal_pose(), 16, 16, h=1e-3)
        assert report["per_field"]["color"] < 1e-4

    def test_opacity_gradient_two_gaussian_overlap(self):
        gs = GaussianSet(
            mu=torch.tensor([[0, 0, 1.5], [0.02, 0.01, 3.0]], dtype=torch.float64),
            scale=torch.full((2, 3), 0.06, dtype=torch.float64),
            rot=torch.tensor([[1.0, 0, 0, 0]] * 2, dtype=torch.float64),
            color=torch.tensor([[1.0, 0.2, 0], [0, 1.0, 0.4]], dtype=torch.float64),
            opacity=torch.tensor([0.6, 0.9], dtype=torch.float64),
        )
        report = gradient_check(gs, frontal_pose(), 16, 16, h=1e-3)
        assert report["per_field"]["opacity"] < 1e-2

    def test_near_zero_scale_finite(self):
        gs = single([0, 0, 2.0], [1e-7, 1e-7, 1e-7], [1, 1, 1], 0.8)
        gs.scale.requires_grad_(True)
        out = render(gs, frontal_pose(), 16, 16)
        out.rgb.sum().backward()
        assert torch.isfinite(gs.scale.grad).all()

    def test_random_scene_full_check(self):
        rng = np.random.default_rng(11)
        gs = random_scene(rng, 8)
        report = gradient_check(gs, frontal_pose(), 16, 16, h=1e-3)
        assert report["n_checked"] > 0
        assert report["max_rel_err"] < 1e-2, report["argmax"]


class TestPng:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(13)
        img = torch.tensor(rng.uniform(0, 1, (16, 16, 3)), dtype=torch.float32)
        p = tmp_path / "x.png"
        write_png(p, img)
        back = read_png(p)
        assert back.shape == (16, 16, 3)
        assert (back - img).abs().max() <= 0.5 / 255 + 1e-6

    def test_alpha_channel(self, tmp_path):
        img = torch.rand(8, 8, 3)
        alpha = torch.rand(8, 8)
        p = tmp_path / "a.png"
        write_png(p, img, alpha)
        from PIL import Image
        assert Image.open(p).mode == "RGBA"
