import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from otrecon.datagen import Circle, render
from otrecon.diffnet import LossKind, LossSpec, output_mass
from otrecon.diffnet.losses import rectify, wasserstein_terms
from otrecon.errors import DegenerateInputError
from otrecon.grid import DiscreteMeasure, PixelGrid, SeededRng
from otrecon.transport import EntropicOTConfig

GRID = PixelGrid(16, 16)
SPEC = LossSpec(LossKind.WASSERSTEIN, EntropicOTConfig(0.05, 10, 1e-3), cost_sigma=4.0)


def disk_at(cx, cy, grid=GRID, radius=3.0):
    return render([Circle(cx, cy, radius, 1.0)], grid)


class TestRectify:
    @pytest.mark.parametrize("scale", [0.0, 0.1, 0.5])
    def test_nonnegative_and_homogeneous(self, scale):
        r = SeededRng(0, 0).generator().standard_normal(50)
        p, _ = rectify(r, scale)
        p3, _ = rectify(3.7 * r, scale)
        assert np.all(p >= 0)
        assert np.allclose(p3, 3.7 * p, rtol=1e-14, atol=0)

    def test_hard_positive_part(self):
        p, vjp = rectify(np.array([-1.0, 0.0, 2.0]), 0.0)
        assert np.array_equal(p, [0.0, 0.0, 2.0])
        assert np.array_equal(vjp(np.ones(3)), [0.0, 0.0, 1.0])

    def test_zero_input(self):
        p, vjp = rectify(np.zeros(4), 0.1)
        assert np.all(p == 0) and np.all(vjp(np.ones(4)) == 0)

    def test_close_to_positive_part_for_small_scale(self):
        r = SeededRng(1, 0).generator().standard_normal(200)
        p, _ = rectify(r, 0.01)
        rms = np.sqrt(np.mean(r * r))
        assert np.max(np.abs(p - np.maximum(r, 0))) <= 0.01 * rms * np.log(2) + 1e-15

    @pytest.mark.parametrize("seed", range(5))
    def test_vjp_matches_finite_differences(self, seed):
        gen = SeededRng(seed, 1).generator()
        r, g, d = gen.standard_normal((3, 30))
        _, vjp = rectify(r, 0.1)
        h = 1e-6
        fd = (rectify(r + h * d, 0.1)[0] - rectify(r - h * d, 0.1)[0]) @ g / (2 * h)
        assert fd == pytest.approx(vjp(g) @ d, rel=1e-7)


class TestWasserstein:
    def test_perfect_reconstruction_beats_shift(self):
        truth = disk_at(8, 8)
        exact = wasserstein_terms(truth.values, truth, SPEC)
        shifted = wasserstein_terms(disk_at(11, 8).values, truth, SPEC)
        assert exact.transport + exact.penalty < shifted.transport + shifted.penalty

    def test_cost_grows_with_shift(self):
        truth = disk_at(8, 8)
        values = [wasserstein_terms(disk_at(8 + s, 8).values, truth, SPEC).transport for s in (0, 1, 2, 3)]
        assert values == sorted(values)

    def test_scale_invariant_transport(self):
        truth = disk_at(8, 8)
        out = disk_at(9, 7).values - 0.05
        a = wasserstein_terms(out, truth, SPEC)
        b = wasserstein_terms(3.7 * out, truth, SPEC)
        assert b.transport == pytest.approx(a.transport, rel=1e-12)
        assert b.output_mass == pytest.approx(3.7 * a.output_mass, rel=1e-12)

    def test_penalty_vanishes_at_matching_mass(self):
        truth = disk_at(8, 8)
        out = disk_at(9, 8).values
        p, _ = rectify(out, SPEC.rectifier_scale)
        out = out * (truth.values.sum() / p.sum())
        assert wasserstein_terms(out, truth, SPEC).penalty == pytest.approx(0.0, abs=1e-24)

    @pytest.mark.parametrize("scale", [0.0, 0.1])
    @pytest.mark.parametrize("seed", range(4))
    def test_gradient_matches_finite_differences(self, scale, seed):
        gen = SeededRng(seed, 2).generator()
        truth = disk_at(7.5, 8.5)
        spec = LossSpec(LossKind.WASSERSTEIN, SPEC.ot, SPEC.cost_sigma, 1.0, rectifier_scale=scale)
        out = disk_at(9, 7).values + 0.2 * gen.standard_normal(GRID.size) + 0.05
        terms = wasserstein_terms(out, truth, spec)
        d = gen.standard_normal(GRID.size)
        d /= np.linalg.norm(d)
        h = 1e-6

        def f(t):
            w = wasserstein_terms(out + t * d, truth, spec)
            return w.transport + w.penalty

        fd = (f(h) - f(-h)) / (2 * h)
        assert fd == pytest.approx(terms.grad @ d, rel=1e-6)

    def test_nonpositive_output_is_degenerate(self):
        truth = disk_at(8, 8)
        with pytest.raises(DegenerateInputError):
            wasserstein_terms(-np.ones(GRID.size), truth, LossSpec(LossKind.WASSERSTEIN, rectifier_scale=0.0))
        with pytest.raises(DegenerateInputError):
            wasserstein_terms(np.zeros(GRID.size), truth, SPEC)

    def test_empty_truth_is_degenerate(self):
        with pytest.raises(DegenerateInputError):
            wasserstein_terms(np.ones(GRID.size), DiscreteMeasure.zeros(GRID), SPEC)

    @settings(max_examples=10, deadline=None)
    @given(arrays(np.float64, GRID.size, elements=st.floats(-1, 1)))
    def test_finite_for_any_signed_output(self, out):
        if not np.any(out != 0):
            return
        terms = wasserstein_terms(out, disk_at(8, 8), SPEC)
        assert np.isfinite(terms.transport) and np.all(np.isfinite(terms.grad))


def test_output_mass_by_kind():
    out = np.array([-1.0, 2.0, 0.5])
    assert output_mass(out, LossSpec(LossKind.MSE)) == 1.5
    assert output_mass(out, LossSpec(LossKind.WASSERSTEIN, rectifier_scale=0.0)) == 2.5
