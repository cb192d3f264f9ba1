import math

import numpy as np
import pytest

from dualflow.errors import CorrelationError, ShapeError
from dualflow.flow import FlowField
from dualflow.metrics import (
    adaptive_iou,
    compare_flows,
    decompose,
    direction_pearson,
    epe,
    iou,
    iou_details,
    partial_correlation,
    partial_from_correlations,
    pearson,
)


def residual_partial(x, y, z):
    """Partial correlation via least-squares residuals on [1, z]."""
    design = np.column_stack([np.ones_like(z), z])
    rx = x - design @ np.linalg.lstsq(design, x, rcond=None)[0]
    ry = y - design @ np.linalg.lstsq(design, y, rcond=None)[0]
    return float(np.corrcoef(rx, ry)[0, 1])


class TestEndpointError:
    def test_known_value(self):
        a = FlowField.uniform(3.0, 4.0, (2, 2))
        b = FlowField.uniform(0.0, 0.0, (2, 2))
        assert epe(a, b) == pytest.approx(5.0)

    def test_masked(self):
        a = np.zeros((2, 2, 2))
        a[0, 0, 0] = 2.0
        mask = np.array([[True, False], [False, False]])
        assert epe(a, np.zeros((2, 2, 2)), mask) == pytest.approx(2.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            epe(np.zeros((2, 2, 2)), np.zeros((2, 3, 2)))


class TestCorrelation:
    def test_pearson_matches_numpy(self, rng):
        x, y = rng.normal(size=50), rng.normal(size=50)
        assert pearson(x, y) == pytest.approx(np.corrcoef(x, y)[0, 1])

    def test_constant_series(self):
        with pytest.raises(CorrelationError, match="constant"):
            pearson(np.ones(5), np.arange(5.0))

    def test_too_few_points(self):
        with pytest.raises(CorrelationError):
            pearson(np.ones(1), np.ones(1))
        with pytest.raises(CorrelationError):
            pearson(np.arange(4.0), np.arange(4.0), mask=np.array([True, False, False, False]))

    def test_direction_pearson_ignores_the_branch_cut(self, rng):
        b = rng.uniform(-math.pi, math.pi, 200)
        a = np.mod(b + rng.normal(0.0, 0.05, 200) + math.pi, 2 * math.pi) - math.pi
        assert direction_pearson(a, b) > 0.99

    def test_partial_formula(self):
        value = partial_from_correlations(0.5, 0.3, 0.2)
        assert value == pytest.approx((0.5 - 0.06) / math.sqrt(0.91 * 0.96))

    def test_partial_matches_residual_regression(self, rng):
        z = rng.normal(size=200)
        x = z + rng.normal(size=200)
        y = 0.5 * z + 0.3 * x + rng.normal(size=200)
        assert partial_correlation(x, y, z) == pytest.approx(residual_partial(x, y, z), abs=1e-10)

    def test_saturated_control(self):
        with pytest.raises(CorrelationError, match="saturated"):
            partial_from_correlations(0.5, 1.0, 0.3)


class TestIoU:
    def test_values(self):
        a = np.array([True, True, False, False])
        b = np.array([True, False, True, False])
        assert iou(a, b) == pytest.approx(1 / 3)
        assert iou(a, a) == 1.0

    def test_empty_union(self):
        result = iou_details(np.zeros(3, dtype=bool), np.zeros(3, dtype=bool))
        assert result.value == 0.0 and result.empty_union

    def test_adaptive_takes_the_complement(self):
        gt = np.array([True, True, False, False])
        result = adaptive_iou(~gt, gt)
        assert result.value == 1.0 and result.flipped
        assert not adaptive_iou(gt, gt).flipped


class TestCompareFlows:
    def field(self, rng, shape=(6, 6)):
        return rng.normal(size=(2, *shape))

    def test_identical_model_and_response(self, rng):
        flow, gt = self.field(rng), self.field(rng)
        cmp = compare_flows(flow, flow, gt)
        assert cmp.epe == 0.0
        assert cmp.r_uv == pytest.approx(1.0)
        assert cmp.r_dir == pytest.approx(1.0)
        assert cmp.rho_uv == pytest.approx(1.0)

    def test_model_equal_to_ground_truth_has_no_partial(self, rng):
        gt = self.field(rng)
        cmp = compare_flows(gt, self.field(rng), gt)
        assert cmp.rho_uv is None
        assert cmp.r_uv is not None

    def test_uniform_speed_is_undefined(self, rng):
        uniform = FlowField.uniform(1.0, 0.0, (4, 4))
        cmp = compare_flows(uniform, self.field(rng, (4, 4)), self.field(rng, (4, 4)))
        assert cmp.r_spd is None
        assert set(cmp.row()) == {"epe", "r_uv", "r_dir", "r_spd", "rho_uv", "rho_dir", "rho_spd"}

    def test_decompose_masks_still_pixels(self):
        flow = np.zeros((2, 1, 2))
        flow[0, 0, 1] = 1.0
        direction, speed = decompose(flow)
        assert direction.mask.tolist() == [[True, False]]
        np.testing.assert_array_equal(speed, [[0.0, 1.0]])

    def test_shapes_must_agree(self, rng):
        with pytest.raises(ShapeError):
            compare_flows(self.field(rng), self.field(rng), self.field(rng, (5, 6)))
