import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from morphmark import transform
from morphmark.autodiff import gradient_check
from morphmark.exceptions import ShapeMismatch, SingularTransform
from morphmark.grid import decode_landmarks, gaussian_heatmap, pixel_grid


def _params(*values):
    return torch.tensor([list(values)], dtype=torch.float64)


class TestAffineFromParams:
    def test_zero_params_are_identity(self):
        theta = transform.affine_from_params(_params(0, 0, 0, 0, 0, 0))
        assert torch.equal(theta, transform.identity_affine(dtype=torch.float64))

    def test_translation(self):
        theta = transform.affine_from_params(
            _params(0.5, 0, 0, 0, 0, 0), transform.AffineIntensities(0.3, 0.2, 1.0, 0.5)
        )
        assert theta.tolist() == [[[1.0, 0.0, 0.5], [0.0, 1.0, 0.0]]]

    def test_rotation(self):
        theta = transform.affine_from_params(_params(0, 0, 0, 0, 0.5, 0))
        root_half = math.sqrt(0.5)
        expected = torch.tensor(
            [[[root_half, root_half, 0.0], [-root_half, root_half, 0.0]]], dtype=torch.float64
        )
        assert torch.allclose(theta, expected)

    def test_matrix_rows(self):
        intensities = transform.AffineIntensities(0.5, 0.25, 1.0, 0.5)
        o = _params(0.1, -0.2, 0.3, -0.4, 0.5, -0.6)
        theta = transform.affine_from_params(o, intensities)
        s_x, s_y = 1 + 0.3 * 0.5, 1 - 0.4 * 0.25
        alpha, beta = 0.5, -0.3
        expected = [
            [
                s_x * math.cos(alpha),
                s_x * (math.cos(alpha) * math.tan(beta) + math.sin(alpha)),
                0.1,
            ],
            [
                -s_y * math.sin(alpha),
                s_y * (-math.sin(alpha) * math.tan(beta) + math.cos(alpha)),
                -0.2,
            ],
        ]
        assert np.allclose(theta[0].numpy(), expected)

    def test_singular_shear(self):
        with pytest.raises(SingularTransform):
            transform.affine_from_params(
                _params(0, 0, 0, 0, 0, 1.0), transform.AffineIntensities(shear=math.pi / 2)
            )

    def test_intensities_must_be_positive(self):
        with pytest.raises(ValueError):
            transform.affine_from_params(_params(0, 0, 0, 0, 0, 0), (1.0, 0.0, 1.0, 1.0))

    def test_gradients(self, generator):
        o = (torch.rand(2, 6, generator=generator, dtype=torch.float64) - 0.5) * 0.8
        assert gradient_check(transform.affine_from_params, (o,), rtol=1e-5)


def test_invert_and_compose_affine():
    theta = transform.affine_from_params(_params(0.1, -0.2, 0.3, -0.1, 0.4, 0.2))
    composed = transform.compose_affine(transform.invert_affine(theta), theta)
    assert torch.allclose(composed, transform.identity_affine(dtype=torch.float64), atol=1e-12)
    with pytest.raises(SingularTransform):
        transform.invert_affine(torch.zeros(1, 2, 3))


def test_warp_affine_identity_is_exact(generator):
    image = torch.rand(2, 1, 12, 9, generator=generator)
    warped = transform.warp_affine(image, transform.identity_affine(2))
    assert (warped - image).abs().max() < 1e-6


def test_warp_affine_translation_matches_integer_shift(generator):
    image = torch.rand(1, 1, 10, 12, generator=generator)
    warped = transform.warp_affine(image, transform.translation_affine(2, 0, 10, 12))
    expected = torch.cat((image[..., :1], image[..., :1], image[..., :-2]), dim=-1)
    assert torch.allclose(warped, expected, atol=1e-5)


def test_warp_affine_opposite_translations_cancel_inside(generator):
    image = torch.rand(1, 1, 16, 16, generator=generator)
    exact = transform.translation_affine(2, -1, 16, 16)
    undo = transform.translation_affine(-2, 1, 16, 16)
    round_trip = transform.warp_affine(transform.warp_affine(image, exact), undo)
    assert torch.allclose(round_trip[..., 2:-2, 2:-2], image[..., 2:-2, 2:-2], atol=1e-4)


def test_warp_affine_half_turn_of_symmetric_image(blob_image):
    symmetric = (blob_image + blob_image.flip(-1, -2)) / 2
    theta = transform.affine_from_params(
        torch.tensor([[0.0, 0.0, 0.0, 0.0, 1.0, 0.0]]),
        transform.AffineIntensities(rotation=math.pi),
    )
    assert torch.allclose(transform.warp_affine(symmetric, theta), symmetric, atol=1e-5)


def test_apply_affine_points_follows_image_content(blob_image):
    theta = transform.translation_affine(2, 0, 32, 32)
    points = torch.tensor([[[12.0, 18.0]]])
    moved = transform.apply_affine_points(points, theta, 32, 32)
    assert torch.allclose(moved, torch.tensor([[[14.0, 18.0]]]), atol=1e-5)

    spot = gaussian_heatmap(points, 32, 32, 2.0)
    decoded = decode_landmarks(transform.warp_affine(spot, theta))
    assert torch.allclose(decoded, moved, atol=1e-3)


def test_apply_affine_points_inverse_round_trip():
    theta = transform.affine_from_params(_params(0.1, 0.05, 0.1, -0.1, 0.2, 0.1))
    points = torch.tensor([[[3.0, 4.0], [20.25, 7.5]]], dtype=torch.float64)
    there = transform.apply_affine_points(points, theta, 24, 28)
    back = transform.apply_affine_points(there, transform.invert_affine(theta), 24, 28)
    assert torch.allclose(back, points, atol=1e-6)
    unchanged = transform.apply_affine_points(
        points, transform.identity_affine(dtype=torch.float64), 24, 28
    )
    assert torch.allclose(unchanged, points)


def test_warp_field():
    image = torch.rand(1, 1, 8, 10)
    assert torch.allclose(transform.warp_field(image, torch.zeros(1, 2, 8, 10)), image)
    field = torch.zeros(1, 2, 8, 10)
    field[:, 0] = 1.0
    shifted = transform.warp_field(image, field)
    assert torch.allclose(shifted[..., :-1], image[..., 1:], atol=1e-6)
    assert torch.allclose(shifted[..., -1], image[..., -1])
    with pytest.raises(ShapeMismatch):
        transform.warp_field(image, torch.zeros(1, 2, 8, 9))


def test_affine_coordinates_and_displacement():
    coordinates = transform.affine_coordinates(transform.identity_affine(), 6, 7)
    assert torch.allclose(coordinates[0], pixel_grid(6, 7), atol=1e-5)
    assert transform.displacement(coordinates).abs().max() < 1e-5

    field = torch.full((1, 2, 6, 7), 0.5)
    composed = transform.compose_field(coordinates, field)
    assert torch.allclose(transform.displacement(composed)[..., 1:-1, 1:-1], field[..., 1:-1, 1:-1])


def test_apply_field_points():
    points = torch.tensor([[[2.0, 3.0], [4.5, 1.25]]])
    assert torch.equal(transform.apply_field_points(points, torch.zeros(1, 2, 8, 8)), points)
    field = torch.zeros(1, 2, 8, 8)
    field[:, 0] = 1.0
    moved = transform.apply_field_points(points, field, sign=1)
    assert torch.allclose(moved, points + torch.tensor([1.0, 0.0]))
    moved_back = transform.apply_field_points(points, field, sign=-1)
    assert torch.allclose(moved_back, points - torch.tensor([1.0, 0.0]))
    with pytest.raises(ValueError):
        transform.apply_field_points(points, field, sign=0)


def test_calibrate_field_point_sign_prefers_inverse_transport():
    warp, field = transform.random_perspective([3, 1], 1.0, 48, 48)
    points = torch.tensor([[12.0, 14.0], [30.0, 20.0], [24.0, 35.0]], dtype=torch.float64)
    truth = torch.from_numpy(warp.forward(points.numpy()))
    sign = transform.calibrate_field_point_sign(
        points[None], field[None].to(torch.float64), truth[None]
    )
    assert sign == -1


class TestRandomPerspective:
    def test_zero_strength_is_identity(self):
        warp, field = transform.random_perspective(0, 0.0, 16, 20)
        assert np.array_equal(warp.matrix, np.eye(3))
        assert field.shape == (2, 16, 20)
        assert torch.count_nonzero(field) == 0

    def test_deterministic(self):
        first, first_field = transform.random_perspective([1, 2], 0.7, 16, 16)
        second, second_field = transform.random_perspective([1, 2], 0.7, 16, 16)
        assert np.array_equal(first.matrix, second.matrix)
        assert torch.equal(first_field, second_field)

    def test_rejects_strength_outside_unit_interval(self):
        with pytest.raises(ValueError):
            transform.random_perspective(0, 1.5, 16, 16)

    def test_field_matches_direct_resampling(self, blob_image):
        warp, field = transform.random_perspective(11, 0.8, 32, 32)
        through_field = transform.warp_field(blob_image, field[None])
        direct = transform.warp_perspective(blob_image, warp)
        assert (through_field - direct).abs().mean() < 1e-3

    def test_forward_inverts_backward(self):
        warp, _ = transform.random_perspective(5, 1.0, 24, 24)
        points = np.array([[3.0, 4.0], [12.5, 20.0]])
        assert np.allclose(warp.backward(warp.forward(points)), points)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(min_value=0, max_value=2 ** 16), strength=st.floats(0.0, 1.0))
    def test_corners_stay_within_jitter(self, seed, strength):
        warp, _ = transform.random_perspective(seed, strength, 20, 30)
        corners = np.array([[0.0, 0.0], [29.0, 0.0], [29.0, 19.0], [0.0, 19.0]])
        moved = warp.backward(corners)
        limit = strength * transform.PERSPECTIVE_JITTER * np.array([30.0, 20.0]) + 1e-6
        assert (np.abs(moved - corners) <= limit).all()
