import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otrecon.errors import CapacityError, ContractError
from otrecon.grid import DiscreteMeasure, PixelGrid, SeededRng
from otrecon.transport import (MAX_EXACT_ATOMS, EntropicOTConfig, TransportCost, apply_kernel,
                               apply_kernel_cost, build_stencil, default_epsilon, exact_transport,
                               max_cost, metric_cost, sinkhorn, sinkhorn_grad, transport_lp,
                               wasserstein_p)


def loop_kernel(grid, cost, eps):
    """Dense kernel built pixel pair by pixel pair; shares no code with the stencil."""
    n = grid.size
    k = np.empty((n, n))
    c = np.empty((n, n))
    for a in range(n):
        ja, ia = divmod(a, grid.width)
        for b in range(n):
            jb, ib = divmod(b, grid.width)
            d = math.hypot(ia - ib, ja - jb) * grid.spacing
            if cost.sigma is None:
                c[a, b] = d * d
            else:
                c[a, b] = 1.0 - math.exp(-((d / cost.sigma) ** 4))
            k[a, b] = math.exp(-c[a, b] / eps)
    return k, c


def atom(grid, index, weight=1.0):
    v = np.zeros(grid.size)
    v[index] = weight
    return DiscreteMeasure(grid, v)


def random_pair(gen, grid, low=0.2):
    a = gen.uniform(low, 1.0, grid.size)
    b = gen.uniform(low, 1.0, grid.size)
    b *= a.sum() / b.sum()
    return DiscreteMeasure(grid, a), DiscreteMeasure(grid, b)


class TestCost:
    def test_squared_examples(self):
        assert TransportCost.squared().of_distance(3.0) == 9.0

    def test_quartic_is_bounded(self):
        c = TransportCost.bounded_quartic(2.0)
        assert c.of_distance(2.0) == pytest.approx(1 - math.exp(-1), rel=1e-15)
        assert c.of_distance(1e6) == 1.0
        assert c.of_distance(0.0) == 0.0

    def test_quartic_needs_sigma(self):
        with pytest.raises(ContractError):
            TransportCost.bounded_quartic(0.0)

    def test_max_cost_and_default_eps(self):
        g = PixelGrid(6, 6)
        assert max_cost(g, TransportCost.squared()) == pytest.approx(50.0)
        assert default_epsilon(g, TransportCost.squared()) == pytest.approx(0.05)
        assert default_epsilon(g, TransportCost.bounded_quartic(3.0)) == 1e-3

    @pytest.mark.parametrize("eps,n", [(0.0, 5), (-1.0, 5), (1.0, 0)])
    def test_config_rejects_bad_values(self, eps, n):
        with pytest.raises(ContractError):
            EntropicOTConfig(eps, n)


class TestStencil:
    def test_single_pixel(self):
        s = build_stencil(PixelGrid(1, 1), TransportCost.squared(), 1.0)
        assert s.kernel.shape == (1, 1) and s.kernel[0, 0] == 1.0
        assert apply_kernel(s, [2.5])[0] == pytest.approx(2.5)

    def test_squared_unit_neighbor(self):
        s = build_stencil(PixelGrid(3, 3), TransportCost.squared(), 1.0)
        assert s.kernel[2, 3] == pytest.approx(math.exp(-1), rel=1e-15)
        assert s.kernel[2, 2] == 1.0

    def test_quartic_at_sigma(self):
        # one displacement of 80 pixels needs an 81-wide grid
        s = build_stencil(PixelGrid(81, 1), TransportCost.bounded_quartic(80.0), 1.0)
        assert s.kernel[0, 80 + 80] == pytest.approx(math.exp(-(1 - math.exp(-1))), rel=1e-14)

    def test_delta_reproduces_kernel_column(self):
        grid = PixelGrid(5, 4)
        cost = TransportCost.squared()
        k, c = loop_kernel(grid, cost, 2.0)
        for method in ("fft", "direct", "dense"):
            s = build_stencil(grid, cost, 2.0, method)
            x = np.zeros(grid.size)
            x[7] = 1.0
            assert np.allclose(apply_kernel(s, x), k[:, 7], rtol=1e-12, atol=1e-15)

    @pytest.mark.parametrize("size", [8, 16])
    @pytest.mark.parametrize("method", ["fft", "direct", "dense"])
    def test_matches_loop_oracle(self, size, method):
        grid = PixelGrid(size, size, spacing=0.5)
        cost = TransportCost.squared()
        eps = 0.05 * size
        k, c = loop_kernel(grid, cost, eps)
        s = build_stencil(grid, cost, eps, method)
        x = SeededRng(size, 1).generator().uniform(0, 1, grid.size)
        assert np.linalg.norm(apply_kernel(s, x) - k @ x) <= 1e-10 * np.linalg.norm(k @ x)
        kc = (k * c) @ x
        assert np.linalg.norm(apply_kernel_cost(s, x) - kc) <= 1e-10 * np.linalg.norm(kc)

    def test_kernel_cost_quartic_5x5(self):
        grid = PixelGrid(5, 5)
        cost = TransportCost.bounded_quartic(2.0)
        k, c = loop_kernel(grid, cost, 0.3)
        s = build_stencil(grid, cost, 0.3)
        x = np.arange(grid.size, dtype=float)
        assert np.allclose(apply_kernel_cost(s, x), (k * c) @ x, rtol=1e-12)

    def test_dense_matches_direct_under_underflow(self):
        grid = PixelGrid(6, 6)
        with pytest.warns(RuntimeWarning):
            direct = build_stencil(grid, TransportCost.squared(), 1e-3, "direct")
        with pytest.warns(RuntimeWarning):
            dense = build_stencil(grid, TransportCost.squared(), 1e-3, "dense")
        x = np.linspace(0.1, 1, grid.size)
        assert np.array_equal(apply_kernel(dense, x), apply_kernel(direct, x))

    def test_rejects_unknown_method_and_length(self):
        grid = PixelGrid(2, 2)
        with pytest.raises(ContractError):
            build_stencil(grid, TransportCost.squared(), 1.0, "loop")
        with pytest.raises(ContractError):
            apply_kernel(build_stencil(grid, TransportCost.squared(), 1.0), np.ones(3))

    def test_underflow_warns(self):
        with pytest.warns(RuntimeWarning, match="underflow"):
            s = build_stencil(PixelGrid(3, 3), TransportCost.squared(), 1e-4)
        assert s.underflow

    def test_no_warning_at_moderate_eps(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            assert not build_stencil(PixelGrid(3, 3), TransportCost.squared(), 1.0).underflow


class TestSinkhorn:
    def test_two_atoms_at_distance_three(self):
        grid = PixelGrid(5, 5)
        s = build_stencil(grid, TransportCost.squared(), 1.0, "direct")
        run = sinkhorn(atom(grid, 0), atom(grid, 3), s, EntropicOTConfig(1.0, 5))
        assert run.value == pytest.approx(9.0, rel=1e-12)

    def test_identical_marginals_small_eps_near_zero(self):
        grid = PixelGrid(4, 4)
        mu = DiscreteMeasure(grid, np.full(grid.size, 1 / 16))
        s = build_stencil(grid, TransportCost.squared(), 0.05, "direct")
        assert sinkhorn(mu, mu, s, EntropicOTConfig(0.05, 200)).value < 1e-6

    def test_symmetric_in_marginals(self):
        grid = PixelGrid(4, 4)
        a, b = random_pair(SeededRng(3, 0).generator(), grid)
        s = build_stencil(grid, TransportCost.squared(), 0.5)
        cfg = EntropicOTConfig(0.5, 500)
        assert sinkhorn(a, b, s, cfg).value == pytest.approx(sinkhorn(b, a, s, cfg).value, rel=1e-9)

    def test_marginals_converge(self):
        grid = PixelGrid(5, 5)
        a, b = random_pair(SeededRng(4, 0).generator(), grid)
        s = build_stencil(grid, TransportCost.squared(), 0.5)
        run = sinkhorn(a, b, s, EntropicOTConfig(0.5, 300))
        assert run.marginal_residual < 1e-10

    def test_value_approaches_exact_from_above_as_eps_shrinks(self):
        grid = PixelGrid(4, 4)
        a, b = random_pair(SeededRng(5, 0).generator(), grid)
        cost = TransportCost.squared()
        exact = exact_transport(a, b, cost)
        values = []
        for eps in (1.0, 0.3, 0.1):
            s = build_stencil(grid, cost, eps, "direct")
            values.append(sinkhorn(a, b, s, EntropicOTConfig(eps, 3000)).value)
        gaps = [v - exact for v in values]
        assert gaps[0] > gaps[1] > gaps[2] > -1e-9

    def test_rejects_unbalanced_and_negative(self):
        grid = PixelGrid(2, 2)
        s = build_stencil(grid, TransportCost.squared(), 1.0)
        cfg = EntropicOTConfig(1.0, 3)
        with pytest.raises(ContractError):
            sinkhorn(atom(grid, 0), atom(grid, 1, 2.0), s, cfg)
        neg = DiscreteMeasure(grid, np.array([2.0, -1.0, 0.0, 0.0]))
        with pytest.raises(ContractError):
            sinkhorn(neg, atom(grid, 1), s, cfg)
        with pytest.raises(ContractError):
            sinkhorn(atom(PixelGrid(4, 1), 0), atom(grid, 1), s, cfg)

    def test_records_trajectories(self):
        grid = PixelGrid(3, 3)
        a, b = random_pair(SeededRng(6, 0).generator(), grid)
        run = sinkhorn(a, b, build_stencil(grid, TransportCost.squared(), 1.0), EntropicOTConfig(1.0, 7))
        assert run.iterations == 7 and run.u.shape == (8, 9)
        assert not run.u.flags.writeable

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32), st.floats(0.3, 3.0))
    def test_value_is_nonnegative_and_bounded_by_max_cost(self, seed, eps):
        grid = PixelGrid(3, 3)
        a, b = random_pair(SeededRng(seed, 0).generator(), grid, low=0.0)
        cost = TransportCost.squared()
        run = sinkhorn(a, b, build_stencil(grid, cost, eps), EntropicOTConfig(eps, 50))
        m = a.values.sum()
        assert -1e-12 <= run.value <= max_cost(grid, cost) * m * (1 + 1e-9)


def _fd(grid, stencil, cfg, a, b, da, db, h):
    def value(t):
        return sinkhorn(DiscreteMeasure(grid, a + t * da), DiscreteMeasure(grid, b + t * db), stencil, cfg).value
    return (value(h) - value(-h)) / (2 * h)


class TestSinkhornGrad:
    @pytest.mark.parametrize("seed", range(20))
    def test_matches_finite_differences(self, seed):
        gen = SeededRng(seed, 77).generator()
        grid = PixelGrid(4, 3)
        stencil = build_stencil(grid, TransportCost.squared(), 0.1, "direct")
        cfg = EntropicOTConfig(0.1, 10, 1e-3)
        a, b = (m.values for m in random_pair(gen, grid))
        run = sinkhorn(DiscreteMeasure(grid, a), DiscreteMeasure(grid, b), stencil, cfg)
        ga, gb = sinkhorn_grad(run, stencil)
        da = gen.standard_normal(grid.size)
        da -= da.mean()
        db = gen.standard_normal(grid.size)
        db -= db.mean()
        exact = ga @ da + gb @ db
        fd = _fd(grid, stencil, cfg, a, b, da, db, 1e-6)
        assert abs(fd - exact) <= 1e-6 * max(abs(exact), 1e-12)

    def test_quartic_cost_gradient(self):
        gen = SeededRng(1, 78).generator()
        grid = PixelGrid(5, 5)
        stencil = build_stencil(grid, TransportCost.bounded_quartic(2.0), 0.05, "direct")
        cfg = EntropicOTConfig(0.05, 10, 1e-4)
        a, b = (m.values for m in random_pair(gen, grid))
        run = sinkhorn(DiscreteMeasure(grid, a), DiscreteMeasure(grid, b), stencil, cfg)
        ga, gb = sinkhorn_grad(run, stencil)
        da = gen.standard_normal(grid.size)
        da -= da.mean()
        exact = ga @ da
        fd = _fd(grid, stencil, cfg, a, b, da, np.zeros_like(b), 1e-6)
        assert abs(fd - exact) <= 1e-6 * abs(exact)

    def test_single_pixel_has_zero_gradient(self):
        grid = PixelGrid(1, 1)
        s = build_stencil(grid, TransportCost.squared(), 1.0)
        run = sinkhorn(atom(grid, 0), atom(grid, 0), s, EntropicOTConfig(1.0, 4))
        ga, gb = sinkhorn_grad(run, s)
        assert run.value == 0.0 and ga[0] == 0.0 and gb[0] == 0.0

    def test_needs_a_run(self):
        with pytest.raises(ContractError):
            sinkhorn_grad(None, build_stencil(PixelGrid(1, 1), TransportCost.squared(), 1.0))


class TestExact:
    def test_two_atom_unit_move(self):
        grid = PixelGrid(2, 1)
        assert exact_transport(atom(grid, 0), atom(grid, 1), TransportCost.squared()) == pytest.approx(1.0)

    def test_split_mass(self):
        # half stays, half moves two pixels
        a = np.array([1.0, 0.0, 0.0])
        b = np.array([0.5, 0.0, 0.5])
        c = TransportCost.squared().matrix([0, 1, 2], [0, 0, 0], [0, 1, 2], [0, 0, 0])
        assert transport_lp(a, b, c) == pytest.approx(2.0)

    def test_identity_is_zero(self):
        grid = PixelGrid(3, 3)
        m = DiscreteMeasure(grid, np.linspace(0.1, 1, 9))
        assert exact_transport(m, m, TransportCost.squared()) == pytest.approx(0.0, abs=1e-12)

    def test_capacity_limit(self):
        grid = PixelGrid(MAX_EXACT_ATOMS + 1, 1)
        m = DiscreteMeasure(grid, np.ones(grid.size))
        with pytest.raises(CapacityError):
            exact_transport(m, m, TransportCost.squared())

    def test_zero_measures(self):
        z = DiscreteMeasure.zeros(PixelGrid(2, 2))
        assert exact_transport(z, z, TransportCost.squared()) == 0.0

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**32))
    def test_entropic_value_dominates_exact(self, seed):
        grid = PixelGrid(3, 3)
        a, b = random_pair(SeededRng(seed, 9).generator(), grid)
        cost = TransportCost.squared()
        s = build_stencil(grid, cost, 0.2, "direct")
        run = sinkhorn(a, b, s, EntropicOTConfig(0.2, 2000))
        assert run.value >= exact_transport(a, b, cost) - 1e-9


class TestMetricHelpers:
    def test_wasserstein_root(self):
        assert wasserstein_p(9.0, 2) == 3.0
        assert wasserstein_p(16.0, 4) == 2.0
        with pytest.raises(ContractError):
            wasserstein_p(-1.0, 2)
        with pytest.raises(ContractError):
            wasserstein_p(1.0, 0.5)

    def test_metric_cost_examples(self):
        assert metric_cost(0.0, 0.0, 1) == 0.0
        assert metric_cost(0.0, 1.0, 1) == pytest.approx(1 - math.exp(-1))
        assert metric_cost([0.0, 0.0], [3.0, 4.0], 2) == pytest.approx(math.sqrt(1 - math.exp(-25)))
        with pytest.raises(ContractError):
            metric_cost(0.0, 1.0, 0.5)

    @given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.sampled_from([1, 2, 4]))
    def test_metric_triangle_small_box(self, x, y, z, n):
        assert metric_cost(x, z, n) <= metric_cost(x, y, n) + metric_cost(y, z, n) + 1e-12

    @given(st.floats(-50, 50), st.floats(-50, 50), st.sampled_from([1, 2, 4]))
    def test_metric_symmetric_and_bounded(self, x, y, n):
        d = metric_cost(x, y, n)
        assert d == metric_cost(y, x, n) and 0 <= d <= 1
