"""Joint dependency scoring of latent embeddings.

Two families share a learnable Cholesky-parameterized correlation: the
multivariate log-likelihood (Gaussian or Student-t applied to quantile-
transformed latents) and the true copula log-density (joint log-pdf minus
the sum of marginal log-pdfs at the quantile-transformed points). Higher
scores mean more normal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import special
from .special import LOG_2PI

U_CLAMP = 1e-6          # probability clamp before quantile transforms
ROUNDTRIP_CLAMP = 1e-15  # tighter clamp for the CDF/inverse-CDF round trip
MIN_DIAG = 1e-12

FAMILIES = ("multivariate", "copula")
BASES = ("gaussian", "student_t")
MARGINAL_MODES = ("parametric", "empirical")


class IllConditionedCorrelationError(FloatingPointError):
    """Raised when the Cholesky factor's diagonal collapses toward zero."""


@dataclass
class DependencyModel:
    """Family tag, Cholesky parameters, dof, and standardization stats."""

    family: str
    base: str
    latent_dim: int
    chol_params: dc.Tensor = None
    dof_raw: dc.Tensor = None
    learn_dof: bool = False
    mu: np.ndarray = None
    sigma: np.ndarray = None
    marginal_mode: str = "parametric"
    reference: list = field(default=None)  # per-dim sorted normal latents

    def __post_init__(self):
        d = self.latent_dim
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.base not in BASES:
            raise ValueError(f"unknown base {self.base!r}")
        if self.marginal_mode not in MARGINAL_MODES:
            raise ValueError(f"unknown marginal_mode {self.marginal_mode!r}")
        if self.marginal_mode == "empirical" and self.family != "copula":
            raise ValueError("empirical marginals are only available for the copula family")
        if self.learn_dof and self.family == "copula":
            raise ValueError("learnable dof is not supported for the copula family")
        if self.chol_params is None:
            self.chol_params = dc.Tensor(identity_chol_params(d), requires_grad=True)
        elif not isinstance(self.chol_params, dc.Tensor):
            self.chol_params = dc.Tensor(np.asarray(self.chol_params, dtype=np.float64),
                                         requires_grad=True)
        n = d * (d + 1) // 2
        if self.chol_params.shape != (n,):
            raise ValueError(f"chol_params must have length {n} for latent_dim {d}")
        if self.dof_raw is None:
            self.dof_raw = dc.Tensor(special.softplus_inv(2.0), requires_grad=self.learn_dof)
        elif not isinstance(self.dof_raw, dc.Tensor):
            self.dof_raw = dc.Tensor(float(self.dof_raw), requires_grad=self.learn_dof)
        if self.mu is None:
            self.mu = np.zeros(d)
        if self.sigma is None:
            self.sigma = np.ones(d)
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if np.any(self.sigma <= 0.0):
            raise ValueError("sigma components must be positive")

    @classmethod
    def create(cls, family: str, base: str, latent_dim: int, dof: float = 4.0,
               learn_dof: bool = False, marginal_mode: str = "parametric"):
        """Fresh model with identity correlation and the requested dof."""
        model = cls(family=family, base=base, latent_dim=latent_dim,
                    learn_dof=learn_dof, marginal_mode=marginal_mode)
        model.set_dof(dof)
        return model

    @property
    def dof(self) -> float:
        """Effective degrees of freedom, always > 2."""
        return 2.0 + float(special.softplus(self.dof_raw.data))

    def set_dof(self, dof: float) -> None:
        if dof <= 2.0:
            raise ValueError("dof must exceed 2")
        self.dof_raw.data = np.asarray(special.softplus_inv(dof - 2.0))

    def learnable_leaves(self) -> list:
        leaves = [self.chol_params]
        if self.learn_dof:
            leaves.append(self.dof_raw)
        return leaves

    def set_standardization(self, mu, sigma) -> None:
        mu = np.asarray(mu, dtype=np.float64)
        sigma = np.asarray(sigma, dtype=np.float64)
        if np.any(sigma <= 0.0):
            raise ValueError("sigma components must be positive")
        self.mu, self.sigma = mu, sigma

    def set_reference(self, normal_latents: np.ndarray) -> None:
        """Store per-dimension sorted standardized latents for empirical PIT."""
        z = np.asarray(normal_latents, dtype=np.float64)
        zs = (z - self.mu) / self.sigma
        self.reference = [np.sort(zs[:, j]) for j in range(zs.shape[1])]

    def correlation(self) -> np.ndarray:
        L = unpack_cholesky(self.chol_params, self.latent_dim).data
        return L @ L.T


def identity_chol_params(d: int) -> np.ndarray:
    """Packed parameters whose unpacked factor is the identity."""
    phi = np.zeros(d * (d + 1) // 2)
    phi[_diag_indices(d)] = special.softplus_inv(1.0)
    return phi


def _diag_indices(d: int) -> np.ndarray:
    rows, cols = np.tril_indices(d)
    return np.flatnonzero(rows == cols)


def pack_cholesky(L: np.ndarray) -> np.ndarray:
    """Inverse of unpack_cholesky for a lower-triangular L with positive diag."""
    L = np.asarray(L, dtype=np.float64)
    d = L.shape[0]
    rows, cols = np.tril_indices(d)
    phi = L[rows, cols].copy()
    diag = rows == cols
    phi[diag] = special.softplus_inv(phi[diag])
    return phi


def unpack_cholesky(chol_params, d: int) -> dc.Tensor:
    """Packed vector -> lower-triangular factor (softplus on the diagonal)."""
    phi = chol_params if isinstance(chol_params, dc.Tensor) else dc.constant(chol_params)
    return dc.lower_from_packed(phi, d)


def _check_conditioning(L: dc.Tensor) -> None:
    if np.any(np.diag(L.data) < MIN_DIAG):
        raise IllConditionedCorrelationError(
            "correlation factor diagonal below 1e-12; matrix numerically singular")


def _as_batch(z) -> dc.Tensor:
    t = z if isinstance(z, dc.Tensor) else dc.constant(np.asarray(z, dtype=np.float64))
    if t.ndim == 1:
        t = dc.reshape(t, (1, -1))
    return t


def standardize(z, model: DependencyModel) -> dc.Tensor:
    zt = _as_batch(z)
    return dc.mul(dc.sub(zt, dc.constant(model.mu)), dc.constant(1.0 / model.sigma))


def batch_standardize(z, normal_rows=None, eps: float = 1e-6) -> dc.Tensor:
    """Standardize a latent batch by its own per-dimension statistics.

    Mean and variance are computed from the rows listed in ``normal_rows``
    (all rows when omitted) and stay on the tape, so gradients flow through
    the statistics. This makes the downstream density invariant to affine
    rescaling of the latents, which removes the shrink-to-a-point degeneracy
    that fixed reference statistics would reward during likelihood ascent.
    """
    zt = _as_batch(z)
    if normal_rows is not None:
        normal_rows = np.asarray(normal_rows, dtype=np.intp)
        zn = dc.take_rows(zt, normal_rows) if normal_rows.size else zt
    else:
        zn = zt
    mu = dc.mean_reduce(zn, axis=0, keepdims=True)
    diff = dc.sub(zn, mu)
    var = dc.mean_reduce(dc.mul(diff, diff), axis=0, keepdims=True)
    inv_sigma = dc.exp(dc.scalar_mul(dc.log(dc.add(var, dc.constant(eps))), -0.5))
    return dc.mul(dc.sub(zt, mu), inv_sigma)


def _factor_and_logdet(model: DependencyModel):
    L = unpack_cholesky(model.chol_params, model.latent_dim)
    _check_conditioning(L)
    diag_raw = dc.take(model.chol_params, _diag_indices(model.latent_dim))
    logdet = dc.scalar_mul(dc.sum_reduce(dc.log(dc.softplus(diag_raw))), 2.0)
    return L, logdet


def _mahalanobis(v: dc.Tensor, L: dc.Tensor) -> dc.Tensor:
    """v^T Sigma^{-1} v per row of v, via one triangular solve."""
    w = dc.tri_solve_lower(L, dc.transpose(v))
    return dc.sum_reduce(dc.mul(w, w), axis=0)


def _dof_tensor(model: DependencyModel) -> dc.Tensor:
    if model.learn_dof:
        return dc.add(dc.softplus(model.dof_raw), dc.constant(2.0))
    return dc.constant(model.dof)


def _quantile_roundtrip(zs: dc.Tensor, model: DependencyModel) -> dc.Tensor:
    """CDF followed by its own inverse, executed as specified.

    Numerically a near-identity in parametric mode; the clamp keeps the
    inverse transform finite for extreme latents.
    """
    if model.base == "gaussian":
        u = dc.clip(dc.normal_cdf(zs), ROUNDTRIP_CLAMP, 1.0 - ROUNDTRIP_CLAMP)
        return dc.normal_icdf(u)
    dof = model.dof
    u = dc.clip(dc.student_t_cdf(zs, dof), ROUNDTRIP_CLAMP, 1.0 - ROUNDTRIP_CLAMP)
    return dc.student_t_icdf(u, dof)


def mv_gaussian_loglik(z, model: DependencyModel,
                       standardized: bool = False) -> dc.Tensor:
    """Multivariate Gaussian log-density of quantile-transformed latents."""
    if model.base != "gaussian":
        raise ValueError("mv_gaussian_loglik requires base='gaussian'")
    zs = _as_batch(z) if standardized else standardize(z, model)
    v = _quantile_roundtrip(zs, model)
    L, logdet = _factor_and_logdet(model)
    m = _mahalanobis(v, L)
    d = model.latent_dim
    out = dc.scalar_mul(dc.add(dc.add(m, logdet), dc.constant(d * LOG_2PI)), -0.5)
    return out


def _mv_t_logpdf(m: dc.Tensor, logdet: dc.Tensor, dof: dc.Tensor, d: int) -> dc.Tensor:
    """Standard normalized multivariate-t log-pdf from the quadratic form."""
    half_nu = dc.scalar_mul(dof, 0.5)
    half_nu_d = dc.scalar_mul(dc.add(dof, dc.constant(float(d))), 0.5)
    const = dc.sub(dc.lgamma(half_nu_d), dc.lgamma(half_nu))
    const = dc.sub(const, dc.scalar_mul(dc.log(dc.scalar_mul(dof, np.pi)), d / 2.0))
    const = dc.sub(const, dc.scalar_mul(logdet, 0.5))
    tail = dc.mul(half_nu_d, dc.log(dc.add(dc.constant(1.0), dc.div(m, dof))))
    return dc.sub(const, tail)


def mv_student_t_loglik(z, model: DependencyModel,
                        standardized: bool = False) -> dc.Tensor:
    """Multivariate Student-t log-density of quantile-transformed latents."""
    if model.base != "student_t":
        raise ValueError("mv_student_t_loglik requires base='student_t'")
    zs = _as_batch(z) if standardized else standardize(z, model)
    v = _quantile_roundtrip(zs, model)
    L, logdet = _factor_and_logdet(model)
    m = _mahalanobis(v, L)
    return _mv_t_logpdf(m, logdet, _dof_tensor(model), model.latent_dim)


def pit(z_std, model: DependencyModel, sorted_reference=None) -> dc.Tensor:
    """Probability integral transform of standardized latents into (0,1)^d.

    Parametric mode maps through the base CDF; empirical mode uses the
    mid-rank ECDF u = (rank + 0.5) / (n + 1) against the per-dimension
    sorted reference. Both clamp to [1e-6, 1 - 1e-6].
    """
    zt = _as_batch(z_std)
    if model.marginal_mode == "parametric":
        if model.base == "gaussian":
            u = dc.normal_cdf(zt)
        else:
            u = dc.student_t_cdf(zt, model.dof)
        return dc.clip(u, U_CLAMP, 1.0 - U_CLAMP)

    reference = sorted_reference if sorted_reference is not None else model.reference
    if not reference or any(len(r) == 0 for r in reference):
        raise ValueError("empirical PIT requires a non-empty per-dimension reference")
    zd = zt.data
    u = np.empty_like(zd)
    for j, ref in enumerate(reference):
        n = len(ref)
        rank = np.searchsorted(ref, zd[:, j], side="left")
        u[:, j] = (rank + 0.5) / (n + 1.0)
    return dc.constant(np.clip(u, U_CLAMP, 1.0 - U_CLAMP))


def gaussian_copula_logdensity(u, model: DependencyModel) -> dc.Tensor:
    """Gaussian copula log-density at u in (0,1)^d."""
    ut = _as_batch(u)
    if np.any(~np.isfinite(ut.data)) or np.any((ut.data <= 0) | (ut.data >= 1)):
        raise ValueError("copula input u must be strictly inside (0, 1)")
    v = dc.normal_icdf(ut)
    L, logdet = _factor_and_logdet(model)
    m = _mahalanobis(v, L)
    vsq = dc.sum_reduce(dc.mul(v, v), axis=-1)
    return dc.scalar_mul(dc.add(dc.sub(m, vsq), logdet), -0.5)


def student_t_copula_logdensity(u, model: DependencyModel) -> dc.Tensor:
    """Student-t copula log-density: joint t log-pdf minus marginal t log-pdfs."""
    ut = _as_batch(u)
    if np.any(~np.isfinite(ut.data)) or np.any((ut.data <= 0) | (ut.data >= 1)):
        raise ValueError("copula input u must be strictly inside (0, 1)")
    dof_t = _dof_tensor(model)
    dof = model.dof
    v = dc.student_t_icdf(ut, dof)
    L, logdet = _factor_and_logdet(model)
    m = _mahalanobis(v, L)
    joint = _mv_t_logpdf(m, logdet, dof_t, model.latent_dim)

    marg_const = (special.gammaln((dof + 1.0) / 2.0) - special.gammaln(dof / 2.0)
                  - 0.5 * np.log(dof * np.pi))
    vv = dc.div(dc.mul(v, v), dof_t)
    marg_tail = dc.scalar_mul(dc.log(dc.add(dc.constant(1.0), vv)), (dof + 1.0) / 2.0)
    marg = dc.sub(dc.constant(marg_const), marg_tail)
    return dc.sub(joint, dc.sum_reduce(marg, axis=-1))


def copula_logdensity_from_latents(z, model: DependencyModel,
                                   standardized: bool = False) -> dc.Tensor:
    zs = _as_batch(z) if standardized else standardize(z, model)
    u = pit(zs, model)
    if model.base == "gaussian":
        return gaussian_copula_logdensity(u, model)
    return student_t_copula_logdensity(u, model)


def log_density(z, model: DependencyModel,
                standardized: bool = False) -> dc.Tensor:
    """Batch scorer: (B, d) latents -> (B,) log-densities for the configured family."""
    if model.family == "multivariate":
        if model.base == "gaussian":
            return mv_gaussian_loglik(z, model, standardized=standardized)
        return mv_student_t_loglik(z, model, standardized=standardized)
    return copula_logdensity_from_latents(z, model, standardized=standardized)


def score(z, model: DependencyModel) -> float:
    """Scalar score of a single latent vector; higher means more normal."""
    out = log_density(np.asarray(z, dtype=np.float64).reshape(1, -1), model)
    return float(out.data[0])


def sample_copula(model: DependencyModel, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Draw u-samples from the fitted copula (for the MI diagnostic)."""
    if model.family != "copula":
        raise ValueError("sampling is defined for the copula family only")
    L = unpack_cholesky(model.chol_params, model.latent_dim).data
    x = rng.standard_normal((n_samples, model.latent_dim)) @ L.T
    if model.base == "gaussian":
        u = special.norm_cdf(x)
    else:
        dof = model.dof
        g = rng.chisquare(dof, size=(n_samples, 1))
        x = x / np.sqrt(g / dof)
        u = special.t_cdf(x, dof)
    return np.clip(u, U_CLAMP, 1.0 - U_CLAMP)
