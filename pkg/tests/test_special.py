import numpy as np
import pytest
from scipy import stats
from scipy.special import gammaln as sp_gammaln

from copad import special


def test_gammaln_matches_scipy_on_positive_range():
    x = np.linspace(0.5, 100.0, 4001)
    ours = special.gammaln(x)
    ref = sp_gammaln(x)
    rel = np.abs(ours - ref) / np.maximum(np.abs(ref), 1.0)
    assert rel.max() <= 1e-13


def test_gammaln_reflection_below_half():
    x = np.array([0.1, 0.25, 0.4, 0.49])
    assert np.allclose(special.gammaln(x), sp_gammaln(x), rtol=1e-12)


def test_softplus_at_zero_is_log_two():
    assert special.softplus(0.0) == pytest.approx(np.log(2.0), abs=1e-15)


def test_softplus_inverse_roundtrip():
    y = np.array([1e-4, 0.1, 1.0, 5.0, 30.0])
    assert np.allclose(special.softplus(special.softplus_inv(y)), y, rtol=1e-12)


def test_norm_ppf_cdf_roundtrip():
    x = np.linspace(-6.0, 6.0, 1201)
    assert np.abs(special.norm_ppf(special.norm_cdf(x)) - x).max() <= 1e-8


def test_norm_ppf_accuracy_against_scipy():
    p = np.concatenate([
        np.geomspace(1e-8, 0.4, 200),
        np.linspace(0.4, 0.6, 50),
        1.0 - np.geomspace(1e-8, 0.4, 200),
    ])
    assert np.abs(special.norm_ppf(p) - stats.norm.ppf(p)).max() <= 1e-9


def test_norm_ppf_rejects_boundary():
    with pytest.raises(ValueError):
        special.norm_ppf(np.array([0.0, 0.5]))


@pytest.mark.parametrize("dof", [2.5, 4.0, 10.0, 100.0])
def test_t_cdf_matches_scipy(dof):
    x = np.linspace(-8.0, 8.0, 801)
    assert np.abs(special.t_cdf(x, dof) - stats.t.cdf(x, dof)).max() <= 1e-12


@pytest.mark.parametrize("dof", [2.5, 4.0, 10.0, 100.0])
def test_t_ppf_cdf_roundtrip(dof):
    x = np.linspace(-6.0, 6.0, 601)
    back = special.t_ppf(special.t_cdf(x, dof), dof)
    assert np.abs(back - x).max() <= 1e-6


def test_t_pdf_at_zero_dof4():
    # Closed form: Gamma(2.5) / (Gamma(2) * sqrt(4*pi)) = 3/8
    assert special.t_pdf(0.0, 4.0) == pytest.approx(0.375, abs=1e-14)
