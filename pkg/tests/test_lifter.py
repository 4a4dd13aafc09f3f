import numpy as np
import pytest
import torch

from splatlift.geometry import Camera, look_at
from splatlift.lifter import (
    LifterConfig,
    LifterParams,
    apply_activations,
    attributes_to_scene,
    gaussian_tensors,
    lift,
    lifter_forward,
    pixel_ray_dirs,
    render_tensors,
)
from splatlift.render import render


def tiny(k=1, sh_degree=0, head_init="small", hw=12):
    return LifterConfig(height=hw, width=hw, k=k, sh_degree=sh_degree, channels=(4, 4, 6, 6), head_init=head_init)


class TestConfig:
    def test_channel_counts(self):
        assert LifterConfig().out_channels == 15
        assert LifterConfig(k=2, sh_degree=1).out_channels == 2 * (12 + 12)

    def test_default_size_and_bound(self):
        cfg = LifterConfig()
        assert LifterParams.create(cfg).n_params() == 86727
        assert cfg.delta_bound == pytest.approx(0.5)

    def test_invalid(self):
        with pytest.raises(ValueError):
            LifterConfig(k=0)
        with pytest.raises(ValueError):
            LifterConfig(channels=(8, 8))


class TestForward:
    def test_shape_and_batch(self):
        p = LifterParams.create(tiny(k=2))
        x = np.random.default_rng(0).uniform(size=(12, 12, 3))
        assert lifter_forward(x, p).shape == (1, 30, 12, 12)
        assert lifter_forward([x, x, x], p).shape == (3, 30, 12, 12)

    def test_resolution_mismatch(self):
        p = LifterParams.create(tiny())
        with pytest.raises(ValueError, match="resolution mismatch"):
            lifter_forward(np.zeros((10, 12, 3)), p)

    def test_seeded(self):
        a, b, c = (LifterParams.create(tiny(), seed=s) for s in (3, 3, 4))
        for (_, pa), (_, pb), (_, pc) in zip(a.net.named_parameters(), b.net.named_parameters(),
                                             c.net.named_parameters()):
            torch.testing.assert_close(pa, pb, rtol=0, atol=0)
        assert not torch.equal(a.net.trunk[0][0].weight, c.net.trunk[0][0].weight)

    def test_create_leaves_global_rng(self):
        torch.manual_seed(11)
        expected = torch.rand(3)
        torch.manual_seed(11)
        LifterParams.create(tiny(), seed=0)
        torch.testing.assert_close(torch.rand(3), expected)

    def test_groups_partition(self):
        p = LifterParams.create(tiny())
        g = p.groups()
        names = {n for n, _ in p.net.named_parameters()}
        assert set(g["trunk"]) | set(g["head"]) == names and not set(g["trunk"]) & set(g["head"])
        assert "out.weight" in g["head"]


class TestActivations:
    def test_zero_raw(self):
        cfg = tiny(k=1)
        a = apply_activations(torch.zeros(cfg.out_channels, 2, 3, dtype=torch.float64), cfg)
        torch.testing.assert_close(a.depth, torch.full((2, 3, 1), 4.5, dtype=torch.float64))
        assert torch.all(a.delta == 0) and torch.all(a.opacity == 0.5)
        torch.testing.assert_close(a.quat[0, 0, 0], torch.tensor([1.0, 0, 0, 0], dtype=torch.float64))
        torch.testing.assert_close(a.scales, torch.full((2, 3, 1, 3), 0.004, dtype=torch.float64))
        torch.testing.assert_close(a.color, torch.full((2, 3, 1, 1, 3), 0.5, dtype=torch.float64))

    def test_hand_example(self):
        cfg = tiny(k=1)
        raw = torch.zeros(cfg.out_channels, 1, 1, dtype=torch.float64)
        raw[0] = np.log(3.0)  # sigmoid = 0.75
        raw[1] = 100.0  # tanh saturates
        raw[4] = -np.log(3.0)  # sigmoid = 0.25
        raw[5:9, 0, 0] = torch.tensor([-1.0, 0.0, 3.0, 4.0])  # plus identity offset -> (0, 0, 3, 4)
        raw[9] = 10.0  # clamped at s_max
        raw[10] = np.log(2.0)
        a = apply_activations(raw, cfg)
        assert a.depth.item() == pytest.approx(1 + 7 * 0.75)
        assert a.delta[0, 0, 0, 0].item() == pytest.approx(0.5)
        assert a.opacity.item() == pytest.approx(0.25)
        np.testing.assert_allclose(a.quat[0, 0, 0].numpy(), [0, 0, 0.6, 0.8], atol=1e-15)
        np.testing.assert_allclose(a.scales[0, 0, 0].numpy(), [0.5, 0.008, 0.004], atol=1e-15)

    def test_ranges(self):
        cfg = tiny(k=2, sh_degree=1)
        a = apply_activations(torch.randn(cfg.out_channels, 5, 5, dtype=torch.float64) * 20, cfg)
        assert torch.all((a.depth >= 1) & (a.depth <= 8))
        assert torch.all(a.delta.abs() <= cfg.delta_bound)
        assert torch.all((a.scales >= cfg.s_min) & (a.scales <= cfg.s_max))
        torch.testing.assert_close(torch.linalg.vector_norm(a.quat, dim=-1), torch.ones(5, 5, 2, dtype=torch.float64))
        assert torch.all((a.color[..., 0, :] >= 0) & (a.color[..., 0, :] <= 1))
        assert a.color.shape == (5, 5, 2, 4, 3)


class TestScene:
    def test_means_on_pixel_rays(self):
        cfg = tiny(k=1)
        cam = Camera.from_fov(12, 12, 60.0, look_at([0.3, -0.2, 0.1], [0, 0, 4]))
        a = apply_activations(torch.zeros(cfg.out_channels, 12, 12, dtype=torch.float64), cfg)
        sc = attributes_to_scene(a, cam)
        pc = cam.pose.apply(sc.means)
        np.testing.assert_allclose(pc[:, 2], 4.5, atol=1e-12)  # depth is camera-frame z
        # row-major pixel order: Gaussian 13 is pixel (row 1, col 1)
        u = cam.fx * pc[13, 0] / pc[13, 2] + cam.cx
        v = cam.fy * pc[13, 1] / pc[13, 2] + cam.cy
        assert (u, v) == pytest.approx((1.5, 1.5))

    def test_ray_dirs_unit_z(self):
        cam = Camera.from_fov(6, 4, 60.0, look_at([1, 0, 0], [0, 0, 4]))
        d = pixel_ray_dirs(cam).numpy()
        np.testing.assert_allclose((d @ cam.pose.rotation.T)[..., 2], 1.0, atol=1e-12)

    def test_k_ordering(self):
        cfg = tiny(k=2)
        raw = torch.zeros(cfg.out_channels, 12, 12, dtype=torch.float64)
        raw[cfg.attrs_per_gaussian] = 5.0  # depth logit of the second Gaussian
        t = gaussian_tensors(apply_activations(raw, cfg), Camera.from_fov(12, 12, 60.0))
        assert t["means"][0, 2] < t["means"][1, 2]
        assert t["means"][0, 2] == pytest.approx(4.5)

    def test_resolution_check(self):
        cfg = tiny()
        a = apply_activations(torch.zeros(cfg.out_channels, 12, 12), cfg)
        with pytest.raises(ValueError):
            gaussian_tensors(a, Camera.from_fov(8, 8, 60.0))

    def test_lift_matches_render(self):
        p = LifterParams.create(tiny(), seed=1)
        cam = Camera.from_fov(12, 12, 60.0)
        img = np.random.default_rng(2).uniform(size=(12, 12, 3))
        sc = lift(img, p, cam, "s0")
        assert len(sc) == 144 and sc.scene_id == "s0"
        raw = lifter_forward(img, p)[0]
        got = render_tensors(gaussian_tensors(apply_activations(raw, p.cfg), cam), cam)
        np.testing.assert_allclose(got.detach().numpy(), render(sc, cam).color.data, atol=1e-6)


class TestGradients:
    def test_head_zero_init_constant_output(self):
        p = LifterParams.create(tiny(head_init="zero"))
        raw = lifter_forward(np.random.default_rng(0).uniform(size=(12, 12, 3)), p)
        assert torch.all(raw == 0)

    def test_weights_finite_differences(self):
        cfg = tiny(hw=10)
        p = LifterParams.create(cfg, seed=5, dtype=torch.float64)
        with torch.no_grad():
            p.net.out.weight.normal_(0, 0.3, generator=torch.Generator().manual_seed(0))
        rng = np.random.default_rng(0)
        img = torch.as_tensor(rng.uniform(size=(10, 10, 3)))
        up = torch.as_tensor(rng.normal(size=(10, 10, 3)))
        cam = Camera.from_fov(10, 10, 60.0, look_at([0.2, 0, 0], [0, 0, 4]))
        cam_in = Camera.from_fov(10, 10, 60.0)

        def loss():
            raw = lifter_forward(img, p)[0]
            return torch.sum(render_tensors(gaussian_tensors(apply_activations(raw, cfg), cam_in), cam) * up)

        p.net.zero_grad()
        loss().backward()
        checks = [(p.net.out.weight, (0, 3)), (p.net.out.weight, (4, 1)), (p.net.out.weight, (12, 2)),
                  (p.net.out.bias, (10,)), (p.net.up[2][0].weight, (1, 2, 1, 1)), (p.net.trunk[0][0].weight, (2, 1, 0, 1))]
        h = 1e-6
        for w, idx in checks:
            idx = idx + (0,) * (w.ndim - len(idx))
            analytic = w.grad[idx].item()
            with torch.no_grad():
                w[idx] += h
                fp = loss().item()
                w[idx] -= 2 * h
                fm = loss().item()
                w[idx] += h
            num = (fp - fm) / (2 * h)
            assert analytic == pytest.approx(num, rel=1e-3, abs=1e-7)


class TestActivationExamples:
    def test_opacity_saturates(self):
        cfg = tiny()
        raw = torch.zeros(cfg.out_channels, 1, 1, dtype=torch.float64)
        raw[4] = 20.0
        assert apply_activations(raw, cfg).opacity.item() == pytest.approx(1.0, abs=1e-8)

    def test_activation_jacobian(self):
        from oracles import central_difference

        cfg = tiny(k=2, sh_degree=1)
        # keep scale logits inside the clamp so the map is smooth at the probe point
        raw = torch.randn(cfg.out_channels, 2, 2, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
        w = {n: torch.randn(getattr(apply_activations(raw, cfg), n).shape, dtype=torch.float64,
                            generator=torch.Generator().manual_seed(i)) for i, n in
             enumerate(("depth", "delta", "opacity", "quat", "scales", "color"))}

        def probe(r):
            a = apply_activations(r, cfg)
            return sum((getattr(a, n) * w[n]).sum() for n in w)

        x = raw.clone().requires_grad_(True)
        (g,) = torch.autograd.grad(probe(x), x)
        num = central_difference(lambda arr: float(probe(torch.as_tensor(arr))), raw.numpy().copy(), 1e-6)
        sel = np.abs(num) > 1e-6
        np.testing.assert_allclose(g.numpy()[sel], num[sel], rtol=1e-4)

    def test_zero_delta_reprojects_to_pixel_centers(self):
        cfg = tiny(hw=12)
        cam = Camera.from_fov(12, 12, 60.0, look_at([0.4, 0.1, -0.2], [0, 0, 4]))
        raw = torch.randn(cfg.out_channels, 12, 12, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
        raw[1:4] = 0.0  # delta
        sc = attributes_to_scene(apply_activations(raw, cfg), cam)
        pc = cam.pose.apply(sc.means)
        u = cam.fx * pc[:, 0] / pc[:, 2] + cam.cx
        v = cam.fy * pc[:, 1] / pc[:, 2] + cam.cy
        vv, uu = np.meshgrid(np.arange(12) + 0.5, np.arange(12) + 0.5, indexing="ij")
        assert max(np.abs(u - uu.ravel()).max(), np.abs(v - vv.ravel()).max()) < 1e-5

    def test_centers_within_own_footprint(self):
        from splatlift.geometry import build_covariance, project_covariance

        cfg = tiny(hw=12)
        cam = Camera.from_fov(12, 12, 60.0)
        gen = torch.Generator().manual_seed(2)
        raw = torch.randn(cfg.out_channels, 12, 12, dtype=torch.float64, generator=gen)
        raw[1:4] *= 0.02  # small offsets, as near initialization
        sc = attributes_to_scene(apply_activations(raw, cfg), cam)
        for i in range(len(sc)):
            pc = cam.pose.apply(sc.means[i])
            mu = np.array([cam.fx * pc[0] / pc[2] + cam.cx, cam.fy * pc[1] / pc[2] + cam.cy])
            cov = project_covariance(cam, sc.means[i], build_covariance(sc.quats[i], sc.scales[i]))
            d = np.array([i % 12 + 0.5, i // 12 + 0.5]) - mu
            assert d @ np.linalg.solve(cov, d) <= 9.0
