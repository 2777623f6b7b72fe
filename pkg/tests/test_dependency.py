import numpy as np
import pytest
from scipy import stats

from copad import dependency as dep
from copad import diffcore as dc
from copad import special

LOG_2PI = np.log(2 * np.pi)


def model_with_corr(corr, family="multivariate", base="gaussian", dof=4.0,
                    marginal_mode="parametric"):
    corr = np.asarray(corr, dtype=np.float64)
    m = dep.DependencyModel.create(family, base, corr.shape[0], dof=dof,
                                   marginal_mode=marginal_mode)
    m.chol_params.data = dep.pack_cholesky(np.linalg.cholesky(corr))
    return m


def rho2(rho):
    return np.array([[1.0, rho], [rho, 1.0]])


class TestUnpackCholesky:
    def test_d1_softplus_of_zero(self):
        L = dep.unpack_cholesky(np.zeros(1), 1)
        assert L.data[0, 0] == pytest.approx(np.log(2.0), abs=1e-12)

    def test_d2_identity(self):
        phi = dep.identity_chol_params(2)
        assert phi[0] == pytest.approx(np.log(np.e - 1.0), abs=1e-12)
        L = dep.unpack_cholesky(phi, 2)
        assert np.allclose(L.data, np.eye(2), atol=1e-15)

    def test_length_mismatch(self):
        with pytest.raises(dc.ShapeMismatchError):
            dep.unpack_cholesky(np.zeros(4), 3)

    def test_logdet_against_dense_lu_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(50):
            d = int(rng.integers(2, 6))
            phi = rng.uniform(-1.0, 1.0, d * (d + 1) // 2)
            L = dep.unpack_cholesky(phi, d).data
            sigma = L @ L.T
            sign, ref = np.linalg.slogdet(sigma)  # dense LU determinant
            assert sign == 1.0
            ours = 2.0 * np.sum(np.log(np.diag(L)))
            assert ours == pytest.approx(ref, abs=1e-9)

    def test_sigma_symmetric_positive_definite(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            d = int(rng.integers(2, 7))
            phi = rng.uniform(-2, 2, d * (d + 1) // 2)
            L = dep.unpack_cholesky(phi, d).data
            sigma = L @ L.T
            assert np.abs(sigma - sigma.T).max() <= 1e-14
            np.linalg.cholesky(sigma)  # raises if not PD


class TestMultivariateGaussian:
    def test_origin_identity(self):
        m = model_with_corr(np.eye(2))
        assert dep.score(np.zeros(2), m) == pytest.approx(-LOG_2PI, abs=1e-9)

    def test_unit_offset(self):
        m = model_with_corr(np.eye(2))
        assert dep.score(np.array([1.0, 0.0]), m) == pytest.approx(-LOG_2PI - 0.5, abs=1e-9)

    def test_matches_dense_reference_d3(self):
        rng = np.random.default_rng(3)
        phi = rng.uniform(-0.8, 0.8, 6)
        m = dep.DependencyModel.create("multivariate", "gaussian", 3)
        m.chol_params.data = phi
        sigma = m.correlation()
        ref = stats.multivariate_normal(mean=np.zeros(3), cov=sigma)
        z = rng.standard_normal((100, 3))
        ours = dep.mv_gaussian_loglik(z, m).data
        assert np.abs(ours - ref.logpdf(z)).max() <= 1e-9

    def test_singular_correlation_raises(self):
        m = dep.DependencyModel.create("multivariate", "gaussian", 2)
        m.chol_params.data = np.array([-60.0, 0.0, special.softplus_inv(1.0)])
        with pytest.raises(dep.IllConditionedCorrelationError):
            dep.score(np.zeros(2), m)

    def test_standardization_applied(self):
        m = model_with_corr(np.eye(2))
        m.set_standardization(np.array([1.0, -1.0]), np.array([2.0, 0.5]))
        assert dep.score(np.array([1.0, -1.0]), m) == pytest.approx(-LOG_2PI, abs=1e-9)


class TestMultivariateStudentT:
    def test_origin_density_independent_of_dof(self):
        for dof in (2.5, 4.0, 17.0):
            m = model_with_corr(np.eye(2), base="student_t", dof=dof)
            assert dep.score(np.zeros(2), m) == pytest.approx(-LOG_2PI, abs=1e-9)

    def test_large_dof_matches_gaussian_d1(self):
        mt = model_with_corr(np.eye(1), base="student_t", dof=1e6)
        mg = model_with_corr(np.eye(1), base="gaussian")
        z = np.linspace(-3, 3, 25).reshape(-1, 1)
        t_ll = dep.mv_student_t_loglik(z, mt).data
        g_ll = dep.mv_gaussian_loglik(z, mg).data
        assert np.abs(t_ll - g_ll).max() <= 1e-3

    def test_matches_textbook_formula_d3(self):
        rng = np.random.default_rng(5)
        dof = 5.0
        m = model_with_corr(np.eye(3), base="student_t", dof=dof)
        m.chol_params.data = rng.uniform(-0.6, 0.6, 6)
        sigma = m.correlation()
        inv = np.linalg.inv(sigma)
        _, logdet = np.linalg.slogdet(sigma)
        z = rng.standard_normal((100, 3))
        quad = np.einsum("bi,ij,bj->b", z, inv, z)
        d = 3
        ref = (special.gammaln((dof + d) / 2) - special.gammaln(dof / 2)
               - (d / 2) * np.log(dof * np.pi) - 0.5 * logdet
               - ((dof + d) / 2) * np.log1p(quad / dof))
        # quantile round trip through the t CDF is only near-identity
        ours = dep.mv_student_t_loglik(z, m).data
        assert np.abs(ours - ref).max() <= 1e-8


class TestPit:
    def test_parametric_gaussian_median(self):
        m = dep.DependencyModel.create("multivariate", "gaussian", 2)
        u = dep.pit(np.zeros((1, 2)), m)
        assert np.allclose(u.data, 0.5)

    def test_empirical_midrank_example(self):
        m = dep.DependencyModel.create("copula", "gaussian", 1, marginal_mode="empirical")
        ref = [np.array([1.0, 2.0, 3.0, 4.0])]
        u = dep.pit(np.array([[2.5]]), m, sorted_reference=ref)
        assert u.data[0, 0] == pytest.approx(0.5)

    def test_empirical_rank_invariance(self):
        rng = np.random.default_rng(9)
        z = rng.standard_normal((40, 1))
        ref = np.sort(rng.standard_normal(64))
        m = dep.DependencyModel.create("copula", "gaussian", 1, marginal_mode="empirical")
        u1 = dep.pit(z, m, sorted_reference=[ref]).data
        warp = lambda x: np.sign(x) * np.abs(x) ** 3 + 0.1 * x  # strictly increasing
        u2 = dep.pit(warp(z), m, sorted_reference=[np.sort(warp(ref))]).data
        assert np.array_equal(u1, u2)

    def test_empirical_needs_reference(self):
        m = dep.DependencyModel.create("copula", "gaussian", 1, marginal_mode="empirical")
        with pytest.raises(ValueError):
            dep.pit(np.zeros((1, 1)), m)

    def test_monotone_per_dimension(self):
        m = dep.DependencyModel.create("multivariate", "student_t", 1, dof=4.0)
        z = np.sort(np.random.default_rng(2).normal(size=50)).reshape(-1, 1)
        u = dep.pit(z, m).data[:, 0]
        assert np.all(np.diff(u) >= 0)


class TestGaussianCopula:
    def test_identity_is_independence(self):
        m = model_with_corr(np.eye(3), family="copula")
        rng = np.random.default_rng(0)
        u = rng.uniform(0.05, 0.95, (50, 3))
        out = dep.gaussian_copula_logdensity(u, m).data
        assert np.abs(out).max() <= 1e-9

    def test_bivariate_median_closed_form(self):
        m = model_with_corr(rho2(0.5), family="copula")
        out = dep.gaussian_copula_logdensity(np.array([[0.5, 0.5]]), m)
        assert out.data[0] == pytest.approx(-0.5 * np.log(0.75), abs=1e-6)

    def test_monte_carlo_normalization(self):
        m = model_with_corr(rho2(0.5), family="copula")
        rng = np.random.default_rng(7)
        u = rng.uniform(size=(1_000_000, 2))
        c = np.exp(dep.gaussian_copula_logdensity(u, m).data)
        se = c.std(ddof=1) / np.sqrt(len(c))
        assert abs(c.mean() - 1.0) <= 3 * se

    def test_boundary_rejected(self):
        m = model_with_corr(np.eye(2), family="copula")
        with pytest.raises(ValueError):
            dep.gaussian_copula_logdensity(np.array([[0.0, 0.5]]), m)
        with pytest.raises(ValueError):
            dep.gaussian_copula_logdensity(np.array([[np.nan, 0.5]]), m)


class TestStudentTCopula:
    def test_identity_median_closed_form(self):
        m = model_with_corr(np.eye(2), family="copula", base="student_t", dof=4.0)
        out = dep.student_t_copula_logdensity(np.array([[0.5, 0.5]]), m)
        expected = np.log(1.0 / (2 * np.pi)) - 2 * np.log(3.0 / 8.0)
        assert expected == pytest.approx(0.123781, abs=1e-6)
        assert out.data[0] == pytest.approx(expected, abs=1e-6)

    def test_large_dof_matches_gaussian_copula(self):
        mt = model_with_corr(rho2(0.5), family="copula", base="student_t", dof=1e6)
        mg = model_with_corr(rho2(0.5), family="copula")
        grid = np.linspace(0.1, 0.9, 5)
        uu = np.array([[a, b] for a in grid for b in grid])
        t_out = dep.student_t_copula_logdensity(uu, mt).data
        g_out = dep.gaussian_copula_logdensity(uu, mg).data
        assert np.abs(t_out - g_out).max() <= 1e-3

    def test_monte_carlo_normalization(self):
        m = model_with_corr(rho2(0.3), family="copula", base="student_t", dof=4.0)
        rng = np.random.default_rng(11)
        u = rng.uniform(size=(1_000_000, 2))
        c = np.exp(dep.student_t_copula_logdensity(u, m).data)
        se = c.std(ddof=1) / np.sqrt(len(c))
        assert abs(c.mean() - 1.0) <= 3 * se


class TestScoreDispatch:
    def test_forwarding_contract(self):
        m = model_with_corr(np.eye(2))
        assert dep.score(np.zeros(2), m) == pytest.approx(-LOG_2PI, abs=1e-9)

    def test_copula_identity_any_z(self):
        m = model_with_corr(np.eye(2), family="copula")
        rng = np.random.default_rng(4)
        for z in rng.normal(size=(10, 2)):
            assert abs(dep.score(z, m)) <= 1e-9

    def test_score_depends_only_on_sigma(self):
        rng = np.random.default_rng(6)
        phi = rng.uniform(-0.5, 0.5, 6)
        m1 = dep.DependencyModel.create("multivariate", "gaussian", 3)
        m1.chol_params.data = phi
        sigma = m1.correlation()
        # re-derive packed parameters from the dense matrix
        m2 = dep.DependencyModel.create("multivariate", "gaussian", 3)
        m2.chol_params.data = dep.pack_cholesky(np.linalg.cholesky(sigma))
        z = rng.normal(size=3)
        assert abs(dep.score(z, m1) - dep.score(z, m2)) <= 1e-12


class TestGradients:
    @pytest.mark.parametrize("family", ["multivariate", "copula"])
    @pytest.mark.parametrize("base", ["gaussian", "student_t"])
    @pytest.mark.parametrize("d", [2, 3, 5])
    def test_chol_gradcheck(self, family, base, d):
        rng = np.random.default_rng(d * 7 + len(family) + len(base))
        m = dep.DependencyModel.create(family, base, d, dof=4.0)
        m.chol_params.data = rng.uniform(-0.5, 0.5, d * (d + 1) // 2)
        z = rng.normal(size=(4, d))

        def f(phi):
            m.chol_params = phi
            return dc.sum_reduce(dep.log_density(z, m))

        leaf = dc.Tensor(m.chol_params.data.copy(), requires_grad=True)
        report = dc.gradcheck(f, [leaf], eps=1e-5, rel_tol=1e-4)
        assert report.passed, report.max_rel_err

    def test_learnable_dof_gradient_multivariate(self):
        rng = np.random.default_rng(8)
        m = dep.DependencyModel.create("multivariate", "student_t", 2, dof=5.0,
                                       learn_dof=True)
        z = rng.normal(size=(4, 2))

        def f(dof_raw):
            m.dof_raw = dof_raw
            return dc.sum_reduce(dep.mv_student_t_loglik(z, m))

        leaf = dc.Tensor(m.dof_raw.data.copy(), requires_grad=True)
        assert dc.gradcheck(f, [leaf], eps=1e-5, rel_tol=1e-4).passed

    def test_learnable_dof_rejected_for_copula(self):
        with pytest.raises(ValueError):
            dep.DependencyModel.create("copula", "student_t", 2, learn_dof=True)
