import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointql.core_model import (
    CovariateField,
    IntensityModel,
    PointPattern,
    QuadratureScheme,
    Window,
    expected_count,
    intensity,
    intensity_gradient,
    make_grid_quadrature,
    read_pattern_csv,
    read_raster,
    write_pattern_csv,
    write_raster,
)
from pointql.errors import DomainError, InputFormatError, InvalidArgumentError

UNIT = Window.square(1.0)


def field(values, window=UNIT, name="z"):
    values = np.asarray(values, float)
    ny, nx = values.shape
    return CovariateField(nx, ny, window, values.ravel(), name)


def two_cov_model(zval, beta, link="log"):
    z = CovariateField(1, 1, UNIT, [zval], "z")
    return IntensityModel((CovariateField.constant(UNIT), z), beta, link)


class TestWindow:
    def test_area_and_dims(self):
        w = Window(0.0, 1000.0, 0.0, 500.0)
        assert w.width == 1000.0 and w.height == 500.0
        assert w.area == 5e5

    @pytest.mark.parametrize("bounds", [(0, 0, 0, 1), (1, 0, 0, 1), (0, 1, 2, 2), (0, np.nan, 0, 1)])
    def test_degenerate_rejected(self, bounds):
        with pytest.raises(InvalidArgumentError):
            Window(*bounds)

    def test_contains_is_closed(self):
        pts = np.array([[0.0, 0.0], [1.0, 1.0], [0.5, 1.0 + 1e-12], [-1e-9, 0.3]])
        np.testing.assert_array_equal(UNIT.contains(pts), [True, True, False, False])

    def test_dilate(self):
        w = UNIT.dilate(0.08)
        assert w.xmin == pytest.approx(-0.08) and w.ymax == pytest.approx(1.08)


class TestPointPattern:
    def test_empty_pattern(self):
        pp = PointPattern(np.empty((0, 2)), UNIT)
        assert pp.n == 0 and len(pp) == 0

    def test_duplicates_allowed(self):
        pp = PointPattern([[0.2, 0.2], [0.2, 0.2]], UNIT)
        assert pp.n == 2

    def test_outside_rejected(self):
        with pytest.raises(InvalidArgumentError):
            PointPattern([[0.2, 0.2], [1.5, 0.2]], UNIT)

    def test_nan_rejected(self):
        with pytest.raises(InvalidArgumentError):
            PointPattern([[np.nan, 0.2]], UNIT)


class TestCovariateField:
    def test_row_major_layout(self):
        # row index runs in y from ymin upward, columns in x
        f = field([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        pts = np.array([[0.1, 0.1], [0.9, 0.1], [0.1, 0.9], [0.5, 0.75]])
        np.testing.assert_array_equal(f.at(pts), [1.0, 3.0, 4.0, 5.0])

    def test_cell_centers_return_stored_values(self):
        rng = np.random.default_rng(1)
        vals = rng.normal(size=(7, 11))
        f = field(vals, Window(0.0, 3.0, -1.0, 1.0))
        np.testing.assert_array_equal(f.at(f.cell_centers()), vals.ravel())

    def test_upper_edges_map_to_last_cell(self):
        f = field([[1.0, 2.0], [3.0, 4.0]])
        assert f.at(np.array([[1.0, 1.0]]))[0] == 4.0

    def test_nonfinite_rejected(self):
        with pytest.raises(InvalidArgumentError):
            field([[1.0, np.inf]])

    def test_wrong_length_rejected(self):
        with pytest.raises(InvalidArgumentError):
            CovariateField(2, 2, UNIT, [1.0, 2.0, 3.0])


class TestMakeGridQuadrature:
    def test_unit_50(self):
        q = make_grid_quadrature(UNIT, 50, 50)
        assert q.m == 2500
        np.testing.assert_allclose(q.weights, 4.0e-4, rtol=1e-14)

    def test_square_2_100(self):
        q = make_grid_quadrature(Window.square(2.0), 100, 100)
        assert q.m == 10000
        np.testing.assert_allclose(q.weights, 4.0e-4, rtol=1e-14)

    def test_single_cell(self):
        q = make_grid_quadrature(UNIT, 1, 1)
        np.testing.assert_array_equal(q.nodes, [[0.5, 0.5]])
        np.testing.assert_array_equal(q.weights, [1.0])

    @pytest.mark.parametrize("nx,ny", [(0, 3), (3, 0), (-1, 2)])
    def test_nonpositive_rejected(self, nx, ny):
        with pytest.raises(InvalidArgumentError):
            make_grid_quadrature(UNIT, nx, ny)

    @settings(max_examples=60, deadline=None)
    @given(
        st.integers(1, 300),
        st.integers(1, 300),
        st.floats(1e-3, 1e4),
        st.floats(1e-3, 1e4),
    )
    def test_weights_sum_to_area(self, nx, ny, w, h):
        win = Window(-w / 3, 2 * w / 3, 0.0, h)
        q = make_grid_quadrature(win, nx, ny)
        assert abs(q.weights.sum() - win.area) <= 1e-12 * win.area
        assert np.all(win.contains(q.nodes))

    def test_cell_counts(self):
        q = make_grid_quadrature(UNIT, 2, 2)
        pts = np.array([[0.1, 0.1], [0.2, 0.3], [0.9, 0.1], [0.6, 0.9]])
        np.testing.assert_array_equal(q.cell_counts(pts), [2, 1, 0, 1])

    def test_irregular_scheme_cells(self):
        q = QuadratureScheme(np.array([[0.25, 0.5], [0.75, 0.5]]), np.array([0.5, 0.5]), UNIT)
        np.testing.assert_array_equal(q.cell_of(np.array([[0.1, 0.9], [0.8, 0.2]])), [0, 1])

    def test_bad_weight_sum_rejected(self):
        with pytest.raises(InvalidArgumentError):
            QuadratureScheme(np.array([[0.5, 0.5]]), np.array([0.9]), UNIT)


class TestIntensity:
    def test_zero_beta_log_is_one(self):
        m = two_cov_model(0.7, [0.0, 0.0])
        assert intensity(m, (0.3, 0.3)) == 1.0

    def test_fitted_predictor_value(self):
        m = two_cov_model(0.0, [-6.9, 4.4])
        assert intensity(m, (0.5, 0.5)) == pytest.approx(1.0077854290485105e-3, rel=1e-14)

    def test_identity_constant(self):
        m = IntensityModel((CovariateField.constant(UNIT),), [2.0], "identity")
        assert intensity(m, (0.1, 0.9)) == 2.0

    def test_identity_nonpositive_carries_location(self):
        m = two_cov_model(1.0, [1.0, -2.0], "identity")
        with pytest.raises(DomainError) as info:
            intensity(m, (0.25, 0.5))
        assert info.value.value == pytest.approx(-1.0)
        np.testing.assert_allclose(info.value.location, [0.25, 0.5])

    def test_unknown_link(self):
        with pytest.raises(InvalidArgumentError):
            two_cov_model(1.0, [1.0, 1.0], "probit")

    def test_beta_length_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            IntensityModel((CovariateField.constant(UNIT),), [1.0, 2.0])


class TestGradient:
    def test_log_at_zero_is_covariate(self):
        np.testing.assert_allclose(intensity_gradient(two_cov_model(0.3, [0.0, 0.0]), (0.5, 0.5)), [1.0, 0.3])

    def test_identity_is_covariate(self):
        m = two_cov_model(0.3, [5.0, 2.0], "identity")
        np.testing.assert_allclose(intensity_gradient(m, (0.5, 0.5)), [1.0, 0.3])

    def test_log_e_squared(self):
        g = intensity_gradient(two_cov_model(1.0, [1.0, 1.0]), (0.5, 0.5))
        np.testing.assert_allclose(g, [np.e**2, np.e**2], rtol=1e-14)

    @pytest.mark.parametrize("link", ["log", "identity"])
    def test_matches_finite_differences(self, link):
        rng = np.random.default_rng(5)
        zf = field(rng.uniform(0.2, 1.0, size=(8, 8)))
        cov = (CovariateField.constant(UNIT), zf)
        for _ in range(100):
            beta = rng.uniform(0.1, 1.5, size=2)
            u = rng.uniform(0, 1, size=2)
            m = IntensityModel(cov, beta, link)
            g = intensity_gradient(m, u)
            fd = np.empty(2)
            for j in range(2):
                h = 1e-6 * (1 + abs(beta[j]))
                e = np.zeros(2)
                e[j] = h
                fd[j] = (intensity(m.with_beta(beta + e), u) - intensity(m.with_beta(beta - e), u)) / (2 * h)
            np.testing.assert_allclose(g, fd, rtol=1e-5)


class TestExpectedCount:
    def test_unit(self):
        m = IntensityModel((CovariateField.constant(UNIT),), [0.0])
        assert expected_count(m, make_grid_quadrature(UNIT, 10, 10)) == pytest.approx(1.0, rel=1e-14)

    def test_400(self):
        m = IntensityModel((CovariateField.constant(UNIT),), [np.log(400.0)])
        assert expected_count(m, make_grid_quadrature(UNIT, 50, 50)) == pytest.approx(400.0, rel=1e-12)

    def test_refinement_oracle(self):
        # smooth covariate evaluated through a fine raster; the coarse rule
        # must agree with a dense 500x500 Riemann sum
        xs = (np.arange(500) + 0.5) / 500
        X, Y = np.meshgrid(xs, xs)
        Z = np.sin(2 * np.pi * X) * np.cos(np.pi * Y) + X * Y
        zf = field(Z)
        m = IntensityModel((CovariateField.constant(UNIT), zf), [np.log(400) - 0.5, 1.0])
        fine = np.sum(np.exp(np.log(400) - 0.5 + Z)) / 500**2
        coarse = expected_count(m, make_grid_quadrature(UNIT, 50, 50))
        assert abs(coarse - fine) / fine < 0.005

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.1, 10.0), st.floats(0.5, 3.0), st.floats(0.0, 2.0))
    def test_identity_linear(self, a, b0, b1):
        zf = field(np.linspace(0.0, 1.0, 16).reshape(4, 4))
        m = IntensityModel((CovariateField.constant(UNIT), zf), [b0, b1], "identity")
        q = make_grid_quadrature(UNIT, 9, 9)
        assert expected_count(m.with_beta([a * b0, a * b1]), q) == pytest.approx(a * expected_count(m, q), rel=1e-12)


class TestIO:
    def test_pattern_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        pp = PointPattern(rng.uniform(0, 1, size=(37, 2)), UNIT)
        write_pattern_csv(tmp_path / "p.csv", pp)
        back = read_pattern_csv(tmp_path / "p.csv", UNIT)
        np.testing.assert_array_equal(back.points, pp.points)

    def test_pattern_header_required(self, tmp_path):
        p = tmp_path / "p.csv"
        p.write_text("a,b\n0.1,0.2\n")
        with pytest.raises(InputFormatError, match=":1"):
            read_pattern_csv(p, UNIT)

    def test_pattern_bad_line_number(self, tmp_path):
        p = tmp_path / "p.csv"
        p.write_text("x,y\n0.1,0.2\n0.3,abc\n")
        with pytest.raises(InputFormatError, match=":3"):
            read_pattern_csv(p, UNIT)

    def test_pattern_outside_lists_lines(self, tmp_path):
        p = tmp_path / "p.csv"
        p.write_text("x,y\n0.1,0.2\n1.3,0.2\n0.5,0.5\n0.5,-2\n")
        with pytest.raises(InputFormatError) as info:
            read_pattern_csv(p, UNIT)
        assert "3" in str(info.value) and "5" in str(info.value)

    def test_empty_pattern_file(self, tmp_path):
        p = tmp_path / "p.csv"
        p.write_text("x,y\n")
        assert read_pattern_csv(p, UNIT).n == 0

    def test_raster_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        win = Window(0.0, 1000.0, 0.0, 500.0)
        f = field(rng.normal(size=(5, 10)), win, name="elev")
        write_raster(tmp_path / "elev.txt", f)
        back = read_raster(tmp_path / "elev.txt")
        assert back.name == "elev" and (back.nx, back.ny) == (10, 5)
        assert back.window == win
        np.testing.assert_array_equal(back.values, f.values)

    def test_raster_short(self, tmp_path):
        p = tmp_path / "r.txt"
        p.write_text("2 2 0 1 0 1\n1 2 3\n")
        with pytest.raises(InputFormatError):
            read_raster(p)

    def test_raster_missing(self, tmp_path):
        with pytest.raises(InputFormatError):
            read_raster(tmp_path / "nothing.txt")
