import numpy as np
import pytest
import torch
from torch import nn

from morphmark import losses, transform
from morphmark.exceptions import DegenerateMask, NegativeWeight, ShapeMismatch
from morphmark.grid import gaussian_heatmap


def _direct_ssim(a: np.ndarray, b: np.ndarray, window: int) -> np.ndarray:
    pad = window // 2
    a = np.pad(a, pad, mode="edge")
    b = np.pad(b, pad, mode="edge")
    height, width = a.shape[0] - 2 * pad, a.shape[1] - 2 * pad
    result = np.empty((height, width))
    for row in range(height):
        for column in range(width):
            patch_a = a[row : row + window, column : column + window]
            patch_b = b[row : row + window, column : column + window]
            mu_a, mu_b = patch_a.mean(), patch_b.mean()
            var_a = (patch_a ** 2).mean() - mu_a ** 2
            var_b = (patch_b ** 2).mean() - mu_b ** 2
            covariance = (patch_a * patch_b).mean() - mu_a * mu_b
            result[row, column] = (
                (2 * mu_a * mu_b + losses.SSIM_C1) * (2 * covariance + losses.SSIM_C2)
            ) / ((mu_a ** 2 + mu_b ** 2 + losses.SSIM_C1) * (var_a + var_b + losses.SSIM_C2))
    return result


class TestGlobal:
    def test_identity_and_extremes(self):
        image = torch.rand(2, 1, 8, 8)
        assert losses.l_global(image, image) == 0
        assert losses.l_global(torch.zeros(1, 1, 8, 8), torch.ones(1, 1, 8, 8)) == 1.0

    def test_matches_loop(self, generator):
        a = torch.rand(2, 1, 8, 8, generator=generator, dtype=torch.float64)
        b = torch.rand(2, 1, 8, 8, generator=generator, dtype=torch.float64)
        expected = sum(abs(x - y) for x, y in zip(a.flatten().tolist(), b.flatten().tolist()))
        assert abs(float(losses.l_global(a, b)) - expected / a.numel()) < 1e-7

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            losses.l_global(torch.zeros(1, 1, 8, 8), torch.zeros(1, 1, 8, 10))


class TestSsim:
    def test_identical_images(self, generator):
        image = torch.rand(1, 1, 12, 12, generator=generator)
        assert torch.allclose(losses.ssim_map(image, image), torch.ones(1, 1, 12, 12), atol=1e-5)

    def test_symmetric(self, generator):
        a = torch.rand(1, 1, 12, 12, generator=generator)
        b = torch.rand(1, 1, 12, 12, generator=generator)
        assert torch.equal(losses.ssim_map(a, b), losses.ssim_map(b, a))

    def test_noisy_constant_matches_direct_evaluation(self):
        rng = np.random.default_rng(0)
        a = np.full((16, 16), 0.5)
        b = a + rng.normal(0.0, 0.1, size=a.shape)
        computed = losses.ssim_map(torch.from_numpy(a)[None, None], torch.from_numpy(b)[None, None])
        direct = _direct_ssim(a, b, 7)
        assert float(computed.mean()) < 1
        assert np.abs(computed[0, 0].numpy() - direct).max() < 1e-6

    def test_even_window(self):
        with pytest.raises(ValueError):
            losses.ssim_map(torch.zeros(1, 1, 8, 8), torch.zeros(1, 1, 8, 8), window=4)


class TestEdgeSimilarity:
    def test_identical_images(self, blob_image):
        points = torch.tensor([[[12.0, 18.0]]])
        assert abs(float(losses.l_esim(blob_image, blob_image, points))) < 1e-6
        shifted = torch.tensor([[[25.0, 3.0]]])
        assert abs(float(losses.l_esim(blob_image, blob_image, shifted))) < 1e-6

    def test_mask_emphasizes_landmark_patch(self, blob_image):
        target = blob_image.clone()
        target[..., 16:21, 10:15] += 0.1
        points = torch.tensor([[[12.0, 18.0]]])
        masked = losses.l_esim(blob_image, target, points)
        uniform = losses.l_esim(blob_image, target, None)
        assert masked > uniform

    def test_degenerate_mask(self, blob_image):
        with pytest.raises(DegenerateMask):
            losses.l_esim(blob_image, blob_image, None, mask=torch.zeros(1, 1, 32, 32))


class TestSmoothness:
    def test_constant_field(self):
        assert losses.l_smooth(torch.full((1, 2, 8, 8), 3.0)) == 0

    def test_unit_slope(self):
        field = torch.zeros(1, 2, 8, 8)
        field[:, 0] = torch.arange(8.0)
        assert float(losses.l_smooth(field)) == pytest.approx(0.25)

    def test_homogeneous(self, generator):
        field = torch.randn(1, 2, 8, 8, generator=generator, dtype=torch.float64)
        assert float(losses.l_smooth(3 * field)) == pytest.approx(9 * float(losses.l_smooth(field)))

    def test_edge_aware_equals_plain_on_flat_image(self, generator):
        field = torch.randn(1, 2, 8, 8, generator=generator)
        flat = torch.full((1, 1, 8, 8), 0.4)
        assert torch.equal(losses.l_esmooth(field, flat), losses.l_smooth(field))

    def test_edge_aware_is_bounded(self, generator):
        field = torch.randn(2, 2, 8, 8, generator=generator)
        image = torch.rand(2, 1, 8, 8, generator=generator)
        assert losses.l_esmooth(field, image) <= losses.l_smooth(field)

    def test_edge_aware_relaxes_along_edges(self):
        image = torch.zeros(1, 1, 8, 8)
        image[..., 4:] = 1.0
        field = torch.zeros(1, 2, 8, 8)
        field[:, 0, :, 4:] = 1.0
        assert losses.l_esmooth(field, image, 0.1) < 0.2 * losses.l_smooth(field)

    def test_temperature(self):
        with pytest.raises(ValueError):
            losses.l_esmooth(torch.zeros(1, 2, 8, 8), torch.zeros(1, 1, 8, 8), 0.0)


class TestFolding:
    def test_zero_field(self):
        determinant = losses.jacobian_determinant(torch.zeros(1, 2, 8, 8))
        assert torch.equal(determinant, torch.ones(1, 8, 8))
        assert losses.l_inv(torch.zeros(1, 2, 8, 8)) == 0

    def test_fold(self):
        field = torch.zeros(1, 2, 8, 8)
        field[:, 0] = -2 * torch.arange(8.0)
        assert torch.allclose(losses.jacobian_determinant(field), torch.full((1, 8, 8), -1.0))
        assert losses.l_inv(field) > 0

    def test_orientation_preserving_field(self):
        field = torch.zeros(1, 2, 8, 8)
        field[:, 0] = 0.1 * torch.arange(8.0)
        field[:, 1] = -0.2 * torch.arange(8.0)[:, None]
        assert losses.l_inv(field) == 0


class TestSynthetic:
    def test_values(self):
        truth = torch.randn(2, 2, 8, 8)
        assert losses.l_syn(truth, truth) == 0
        offset = truth.clone()
        offset[:, 0] += 1.0
        assert float(losses.l_syn(offset, truth)) == pytest.approx(1.0)

    def test_members(self):
        truth = torch.zeros(2, 2, 4, 4)
        predicted = truth.clone()
        predicted[1] += 1.0
        assert losses.l_syn(predicted, truth, torch.tensor([True, False])) == 0
        assert float(losses.l_syn(predicted, truth, torch.tensor([False, True]))) == 2.0
        assert losses.l_syn(predicted, truth, torch.tensor([False, False])) == 0

    def test_matches_loop(self, generator):
        a = torch.randn(1, 2, 4, 4, generator=generator, dtype=torch.float64)
        b = torch.randn(1, 2, 4, 4, generator=generator, dtype=torch.float64)
        total = 0.0
        for row in range(4):
            for column in range(4):
                total += float((a[0, :, row, column] - b[0, :, row, column]).pow(2).sum())
        assert abs(float(losses.l_syn(a, b)) - total / 16) < 1e-7


class TestStageOneTotal:
    one = torch.tensor(1.0)

    def test_arithmetic(self):
        report = losses.stage1_total(
            self.one, [self.one] * 2, [self.one] * 2, [self.one] * 2, self.one, 1.0, 0.25, 2.0
        )
        assert float(report.total) == pytest.approx(9.5)
        assert set(report.terms()) == {
            "global_sim",
            "local_sim_1",
            "smooth_1",
            "inv_1",
            "syn_1",
            "local_sim_2",
            "smooth_2",
            "inv_2",
            "syn_2",
        }
        assert report.to_record()["total"] == pytest.approx(9.5)

    def test_zero_ramp(self):
        report = losses.stage1_total(
            torch.tensor(0.3), [self.one], [self.one], [self.one], self.one, 0.0, 0.25, 5.0
        )
        assert float(report.total) == pytest.approx(0.3)

    def test_all_zero(self):
        zero = torch.tensor(0.0)
        report = losses.stage1_total(zero, [zero], [zero], [zero], [zero], 1.0, 0.25, 5.0)
        assert report.total == 0

    def test_errors(self):
        with pytest.raises(NegativeWeight):
            losses.stage1_total(self.one, [self.one], [self.one], [self.one], self.one, 1, -1, 1)
        with pytest.raises(ValueError):
            losses.stage1_total(self.one, [], [], [], self.one, 1.0, 0.25, 1.0)
        with pytest.raises(ValueError):
            losses.stage1_total(self.one, [self.one], [self.one], [self.one], [], 1.0, 0.25, 1.0)


class TestHeat:
    def test_values(self):
        target = torch.rand(2, 3, 8, 8)
        assert losses.l_heat(target, target) == 0
        assert float(losses.l_heat(target + 0.1, target)) == pytest.approx(0.01, rel=1e-4)

    def test_per_sample(self):
        target = torch.zeros(2, 1, 4, 4)
        pred = target.clone()
        pred[1] = 1.0
        assert losses.l_heat(pred, target, reduction="none").tolist() == [0.0, 1.0]


class _Constant(nn.Module):
    def __init__(self, heatmaps: torch.Tensor):
        super().__init__()
        self.heatmaps = heatmaps

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return self.heatmaps.expand(image.shape[0], -1, -1, -1)


def _conv_model(seed: int) -> nn.Module:
    torch.manual_seed(seed)
    return nn.Conv2d(1, 2, 3, padding=1)


class TestConsistency:
    def test_identity_views(self, blob_image):
        identity = transform.identity_affine()
        model = _conv_model(0)
        assert float(losses.l_con_self(model, blob_image, identity, identity)) < 1e-10

    def test_equivariant_model(self, blob_image):
        easy = transform.affine_from_params(torch.tensor([[0.02, -0.01, 0.0, 0.0, 0.05, 0.0]]))
        hard = transform.affine_from_params(torch.tensor([[-0.03, 0.02, 0.05, -0.05, -0.1, 0.0]]))
        assert float(losses.l_con_self(lambda image: image, blob_image, easy, hard)) < 1e-3

    def test_constant_model_under_translation(self):
        heatmap = gaussian_heatmap(torch.tensor([[[15.0, 16.0]]]), 32, 32, 3.0)
        hard = transform.translation_affine(2, 0, 32, 32)
        loss = losses.l_con_self(
            _Constant(heatmap), torch.zeros(1, 1, 32, 32), transform.identity_affine(), hard
        )
        shifted = transform.warp_affine(heatmap, hard)
        assert float(loss) == pytest.approx(float(((heatmap - shifted) ** 2).mean()), rel=1e-5)

    def test_cross_with_zero_teacher(self, blob_image):
        f = _conv_model(1)
        hard = transform.translation_affine(1, 1, 32, 32)
        zero = _Constant(torch.zeros(1, 2, 32, 32))
        loss = losses.l_con_cross(f, zero, blob_image, transform.identity_affine(), hard)
        expected = (f(transform.warp_affine(blob_image, hard)) ** 2).mean()
        assert torch.allclose(loss, expected)

    def test_gradient_reaches_only_the_student(self, blob_image):
        f, g = _conv_model(2), _conv_model(3)
        easy = transform.identity_affine()
        hard = transform.translation_affine(1.5, 0, 32, 32)
        losses.l_con_cross(f, g, blob_image, easy, hard).backward()
        assert f.weight.grad is not None
        assert g.weight.grad is None

        shared = _conv_model(4)
        forward = losses.l_con_cross(shared, shared, blob_image, easy, hard)
        backward = losses.l_con_self(shared, blob_image, easy, hard)
        assert torch.equal(forward, backward)

    def test_permutation_swaps_channels(self):
        heatmaps = torch.stack(
            (torch.zeros(8, 8), torch.ones(8, 8)),
        )[None]
        moved = losses.transport_heatmaps(
            heatmaps, transform.identity_affine(), torch.tensor([[1, 0]])
        )
        assert torch.allclose(moved[0, 0], torch.ones(8, 8))
        assert torch.allclose(moved[0, 1], torch.zeros(8, 8))

    def test_easy_to_hard(self):
        easy = transform.affine_from_params(torch.tensor([[0.1, 0.0, 0.0, 0.0, 0.2, 0.0]]))
        hard = transform.affine_from_params(torch.tensor([[0.0, -0.1, 0.1, 0.0, -0.1, 0.0]]))
        view_map = losses.easy_to_hard(easy, hard)
        assert torch.allclose(transform.compose_affine(easy, view_map), hard, atol=1e-6)

    def test_per_sample_reduction(self, blob_image):
        images = blob_image.expand(3, -1, -1, -1)
        hard = transform.translation_affine(2, 0, 32, 32).expand(3, -1, -1)
        easy = transform.identity_affine(3)
        values = losses.l_con_self(_conv_model(5), images, easy, hard, reduction="none")
        assert values.shape == (3,)
        assert torch.allclose(values, values[0].expand(3))
