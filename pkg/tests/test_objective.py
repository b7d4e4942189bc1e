import math

import numpy as np
import pytest
from scipy.spatial.distance import cdist

import invfree as iv
from invfree.kernels import AnisotropyForm, radial_profile
from invfree.objective import BLOCK_ROWS, QuadraticEvaluator, fd_gradient, quadratic_summary
from invfree.sampling import make_perturbed_lattice, simulate_field


def dense_oracle(y, coords, family, aniso):
    """Explicit-matrix route: build K, then direct products with fsum."""
    b = aniso.b_matrix(coords.shape[1])
    k = np.asarray(radial_profile(family, cdist(coords @ b.T, coords @ b.T)))
    np.fill_diagonal(k, 1.0)
    yky = math.fsum((np.outer(y, y) * k).reshape(-1))
    frob = math.fsum((k * k).reshape(-1))
    return yky, frob


def random_config(gen):
    n = int(gen.integers(5, 200))
    d = int(gen.integers(1, 4))
    coords = gen.uniform(0.0, max(4.0, n ** (1.0 / d)), size=(n, d))
    kind = gen.choice(["matern", "powered_exponential", "rational_quadratic"])
    if kind == "matern":
        family = iv.matern(float(gen.choice([0.5, 1.5, 2.5, 0.8])))
    elif kind == "powered_exponential":
        family = iv.powered_exponential(float(gen.uniform(0.3, 1.9)))
    else:
        family = iv.rational_quadratic(float(gen.uniform(0.3, 2.5)), d)
    if d == 2 and gen.random() < 0.5:
        aniso = iv.diagonal_ranges(float(gen.uniform(0.5, 10.0)), float(gen.uniform(0.5, 10.0)))
    elif gen.random() < 0.3:
        m = gen.normal(size=(d, d))
        aniso = iv.full_matrix(m @ m.T + 0.3 * np.eye(d))
    else:
        aniso = iv.isotropic(float(gen.uniform(0.5, 10.0)))
    y = gen.normal(size=n)
    return y, coords, family, aniso


class TestQuadraticSummary:
    def test_two_site_closed_form(self):
        sites = iv.SiteSet(np.array([[0.0], [1.0]]))
        y = np.array([1.0, 1.0])
        s = quadratic_summary(y, sites, iv.matern(0.5), iv.isotropic(1.0))
        assert s.yky == pytest.approx(2.0 + 2.0 * math.exp(-1.0), rel=1e-14)
        assert s.k_frob_sq == pytest.approx(2.0 + 2.0 * math.exp(-2.0), rel=1e-14)
        assert s.n == 2

    def test_identity_limit_for_distant_sites(self, rng):
        # Correlations underflow to exact zeros at astronomical separations.
        coords = np.array([[0.0, 0.0], [1e9, 0.0], [0.0, 2e9], [3e9, 3e9]])
        y = rng.normal(size=4)
        s = quadratic_summary(y, iv.SiteSet(coords), iv.matern(0.5), iv.isotropic(1.0))
        assert s.yky == pytest.approx(float(y @ y), rel=1e-15)
        assert s.k_frob_sq == 4.0

    def test_dense_oracle_equivalence_50_configs(self):
        gen = np.random.default_rng(7)
        worst = 0.0
        for _ in range(50):
            y, coords, family, aniso = random_config(gen)
            s = quadratic_summary(y, iv.SiteSet(coords), family, aniso)
            yky_ref, frob_ref = dense_oracle(y, coords, family, aniso)
            worst = max(worst, abs(s.yky - yky_ref) / abs(yky_ref), abs(s.k_frob_sq - frob_ref) / frob_ref)
        assert worst < 1e-12

    def test_frobenius_at_least_n(self, rng):
        for _ in range(5):
            coords = rng.uniform(0.0, 5.0, size=(30, 2))
            y = rng.normal(size=30)
            s = quadratic_summary(y, iv.SiteSet(coords), iv.matern(1.5), iv.isotropic(2.0))
            assert s.k_frob_sq >= s.n

    def test_worker_count_invariance(self):
        sites = make_perturbed_lattice(20, 2, 0.2, 5)  # n = 400, two row blocks
        assert sites.n > BLOCK_ROWS
        y = np.sin(np.arange(sites.n) * 0.37)
        form = AnisotropyForm("isotropic", 2)
        e1 = QuadraticEvaluator(sites, y, iv.matern(0.5), form, workers=1)
        e8 = QuadraticEvaluator(sites, y, iv.matern(0.5), form, workers=8)
        s1, s8 = e1.summary([3.0]), e8.summary([3.0])
        assert s1.yky == s8.yky and s1.k_frob_sq == s8.k_frob_sq

    def test_permutation_invariance_bitwise(self, rng):
        sites = make_perturbed_lattice(12, 2, 0.3, 2)
        y = rng.normal(size=sites.n)
        form = AnisotropyForm("isotropic", 2)
        base = QuadraticEvaluator(sites.sites, y, iv.matern(0.5), form).summary([2.5])
        perm = rng.permutation(sites.n)
        shuffled = QuadraticEvaluator(sites.sites[perm], y[perm], iv.matern(0.5), form).summary([2.5])
        assert base.yky == shuffled.yky and base.k_frob_sq == shuffled.k_frob_sq

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            quadratic_summary(np.ones(3), iv.SiteSet(np.zeros((2, 1))), iv.matern(0.5), iv.isotropic(1.0))


class TestObjectives:
    def setup_method(self):
        self.sites = iv.SiteSet(np.array([[0.0], [1.0]]))
        self.y = np.array([1.0, 1.0])
        self.form = AnisotropyForm("isotropic", 1)
        self.family = iv.matern(0.5)

    def test_f_n_hand_value(self):
        yky = 2.0 + 2.0 * math.exp(-1.0)
        frob = 2.0 + 2.0 * math.exp(-2.0)
        got = iv.f_n(self.y, self.sites, self.family, self.form, 1.0, [1.0])
        assert got == pytest.approx(0.5 * (yky - frob / 2.0), rel=1e-14)

    def test_f_n_identity_case_zero_vector(self):
        coords = np.array([[0.0], [1e9]])
        got = iv.f_n(np.zeros(2), iv.SiteSet(coords), self.family, self.form, 1.0, [1.0])
        assert got == pytest.approx(-0.5, rel=1e-15)

    def test_g_n_values(self):
        yky = 2.0 + 2.0 * math.exp(-1.0)
        frob = 2.0 + 2.0 * math.exp(-2.0)
        got = iv.g_n(self.y, self.sites, self.family, self.form, [1.0])
        assert got == pytest.approx(yky / math.sqrt(frob), rel=1e-14)
        coords = np.array([[0.0], [1e9]])
        y = np.array([1.0, 2.0])
        assert iv.g_n(y, iv.SiteSet(coords), self.family, self.form, [1.0]) == pytest.approx(
            5.0 / math.sqrt(2.0), rel=1e-14
        )

    def test_g_n_quadratic_homogeneity(self, rng):
        sites = make_perturbed_lattice(5, 2, 0.2, 3)
        y = rng.normal(size=sites.n)
        form = AnisotropyForm("isotropic", 2)
        base = iv.g_n(y, sites, self.family, form, [2.0])
        scaled = iv.g_n(3.0 * y, sites, self.family, form, [2.0])
        assert scaled == pytest.approx(9.0 * base, rel=1e-12)

    def test_phi_hat_values_and_clamping(self):
        value, clamped = iv.phi_hat(self.y, self.sites, self.family, self.form, [1.0])
        expected = (2.0 + 2.0 * math.exp(-1.0)) / (2.0 + 2.0 * math.exp(-2.0))
        assert not clamped and value == pytest.approx(expected, rel=1e-14)

        coords = np.array([[0.0], [1e9]])
        y = np.array([1.0, 2.0])
        value, clamped = iv.phi_hat(y, iv.SiteSet(coords), self.family, self.form, [1.0])
        assert not clamped and value == pytest.approx(2.5, rel=1e-14)  # ||y||^2 / n

        value, clamped = iv.phi_hat(np.zeros(2), self.sites, self.family, self.form, [1.0])
        assert clamped and value == 1e-4

    def test_vertex_identity(self, rng):
        sites = make_perturbed_lattice(4, 2, 0.2, 1)
        y = rng.normal(size=sites.n)
        form = AnisotropyForm("isotropic", 2)
        ev = QuadraticEvaluator(sites, y, self.family, form)
        for theta in ([1.0], [4.0], [9.0]):
            ratio = ev.phi_ratio(theta)
            lo, hi = 1e-4, 1e4
            best = min(max(ratio, lo), hi)
            f_best = ev.f(best, theta)
            for phi in rng.uniform(lo, 20.0, size=100):
                assert f_best >= ev.f(float(phi), theta) - 1e-12 * abs(f_best)


class TestFdGradient:
    def test_linear_exact(self):
        c = np.array([2.0, -3.0, 0.5])
        grad = fd_gradient(lambda t: float(c @ t), np.array([1.0, 1.0, 1.0]))
        np.testing.assert_allclose(grad, c, atol=1e-9)

    def test_quadratic(self):
        grad = fd_gradient(lambda t: float(t @ t), np.array([1.0, 2.0]))
        np.testing.assert_allclose(grad, [2.0, 4.0], atol=1e-6)

    def test_one_sided_at_faces(self):
        bounds = [(0.0, 1.0)]
        grad = fd_gradient(lambda t: float(t[0] ** 2), np.array([0.0]), step=1e-3, bounds=bounds)
        assert grad[0] == pytest.approx(1e-3, abs=1e-12)  # forward difference of x^2 at 0
        grad = fd_gradient(lambda t: float(t[0] ** 2), np.array([1.0]), step=1e-3, bounds=bounds)
        assert grad[0] == pytest.approx(2.0 - 1e-3, abs=1e-10)

    def test_zero_width_box(self):
        with pytest.raises(ValueError, match="zero width"):
            fd_gradient(lambda t: 0.0, np.array([0.5]), bounds=[(0.5, 0.5)])
        with pytest.raises(ValueError, match="narrower"):
            fd_gradient(lambda t: 0.0, np.array([0.5]), step=0.4, bounds=[(0.3, 0.6)])

    def test_richardson_agreement_on_profile(self, rng):
        sites = make_perturbed_lattice(10, 2, 0.3, 6)
        y = simulate_field(sites, iv.matern(0.5), iv.isotropic(4.0), 1.0, 2048, 3).y
        form = AnisotropyForm("isotropic", 2)
        ev = QuadraticEvaluator(sites, y, iv.matern(0.5), form)

        def fun(t):
            return ev.g(t)

        theta = np.array([3.0])
        g_h = fd_gradient(fun, theta, step=1e-3)[0]
        g_h2 = fd_gradient(fun, theta, step=5e-4)[0]
        richardson = (4.0 * g_h2 - g_h) / 3.0
        assert abs(g_h - richardson) / abs(richardson) < 1e-4


class TestExpectationIdentities:
    def test_mean_quadratic_form_matches_trace_identity(self):
        # E[Y'K(theta)Y] = phi0 * <K(theta0), K(theta)> over simulated fields.
        phi0, theta0, probe = 1.0, 4.0, 6.0
        sites = make_perturbed_lattice(8, 2, 0.1, 13)
        family, aniso0 = iv.matern(0.5), iv.isotropic(theta0)
        form = AnisotropyForm("isotropic", 2)
        R = 2000
        values = np.empty(R)
        ev = None
        for r in range(R):
            y = simulate_field(sites, family, aniso0, phi0, 2048, 9000 + r).y
            ev = QuadraticEvaluator(sites, y, family, form)
            values[r] = ev.summary([probe]).yky

        b0 = aniso0.b_matrix(2)
        k0 = np.asarray(radial_profile(family, cdist(sites.sites @ b0, sites.sites @ b0)))
        bp = iv.isotropic(probe).b_matrix(2)
        kp = np.asarray(radial_profile(family, cdist(sites.sites @ bp, sites.sites @ bp)))
        np.fill_diagonal(k0, 1.0)
        np.fill_diagonal(kp, 1.0)
        target = phi0 * float(np.sum(k0 * kp))
        se = values.std(ddof=1) / math.sqrt(R)
        assert abs(values.mean() - target) <= 4.0 * se
