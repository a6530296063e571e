"""Combining exchangeable, dependent p-values into a single p-value.

Given M p-values from the same data (one per conditional simulation), the
statistic T = -2 sum log p_i is referred to a Gamma(a, b) distribution whose
parameters are matched to the first two moments of T under an exchangeable
intra-class correlation model for t_i = -2 log p_i: each t_i is marginally
chi-square on 2 degrees of freedom, and cov(t_i, t_j) = 4 rho for i != j.
The common correlation rho is estimated either by a bivariate Gaussian-copula
composite likelihood (CPL) or by method of moments (MOM); rho = 0 reduces to
Fisher's combined probability test, and NVE is the naive average of the
p-values, kept for comparison only.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import special

from ._rng import substream

__all__ = [
    "CombineResult",
    "fisher_T",
    "mom_rho",
    "copula_rho",
    "gamma_params",
    "gamma_sf",
    "combine",
    "METHODS",
]

METHODS = ("CPL", "MOM", "NVE", "FISHER")

_P_FLOOR = 1e-300
_RHO_MAX = 1.0 - 1e-9
_R_MAX = 0.999


@dataclass(frozen=True)
class CombineResult:
    """Outcome of combining M p-values.

    ``rho_hat``, ``a`` and ``b`` are None for the NVE method, which bypasses
    the Gamma approximation entirely.
    """

    T: float
    p_final: float
    method: str
    alpha: float
    reject: bool
    rho_hat: float | None = None
    a: float | None = None
    b: float | None = None
    M: int = 0


def _validate_pvalues(pvalues) -> np.ndarray:
    p = np.asarray(pvalues, dtype=float).reshape(-1)
    if p.size < 1:
        raise ValueError("need at least one p-value")
    if np.any(~np.isfinite(p)) or np.any(p <= 0.0) or np.any(p > 1.0):
        raise ValueError("p-values must lie in (0, 1]")
    return p


def fisher_T(pvalues) -> float:
    """T = -2 sum log p_i, with p-values clamped below at 1e-300."""
    p = _validate_pvalues(pvalues)
    return float(-2.0 * np.log(np.maximum(p, _P_FLOOR)).sum())


def mom_rho(t) -> float:
    """Method-of-moments estimate of the exchangeability level.

    rho = 1 - [sum_{i<j}(t_i - t_j)^2 / (M-1)] / [sum_i (t_i - 2)^2],
    clamped to [0, 1); a zero denominator (every t_i exactly at its null
    mean 2) degenerates to the upper clamp.
    """
    t = np.asarray(t, dtype=float).reshape(-1)
    M = t.size
    if M < 2:
        raise ValueError("method-of-moments needs at least two values")
    denom = float(((t - 2.0) ** 2).sum())
    if denom == 0.0:
        warnings.warn("all t_i equal 2; exchangeability level is unidentified")
        return _RHO_MAX
    # sum over unordered pairs of (t_i - t_j)^2 = M sum t^2 - (sum t)^2
    pair_sum = M * float((t**2).sum()) - float(t.sum()) ** 2
    rho = 1.0 - (pair_sum / (M - 1)) / denom
    return float(np.clip(rho, 0.0, _RHO_MAX))


def _exp_quantiles(t: np.ndarray) -> np.ndarray:
    """Gaussian scores Phi^{-1}(F(t)) of the chi2_2 marginals, clipped."""
    u = -np.expm1(-t / 2.0)  # 1 - exp(-t/2)
    return special.ndtri(np.clip(u, 1e-15, 1.0 - 1e-15))


def _copula_loglik(r: float, sum_q2: float, sum_q: float, M: int) -> float:
    """Pairwise Gaussian-copula log-likelihood up to r-free terms.

    The copula density at scores (q_i, q_j) is
    (1-r^2)^{-1/2} exp(-[r^2 (q_i^2+q_j^2) - 2 r q_i q_j] / (2(1-r^2))),
    so the pairwise sum depends on the scores only through sum q_i and
    sum q_i^2.
    """
    pairs = M * (M - 1) / 2.0
    a = (M - 1) * sum_q2               # sum over pairs of q_i^2 + q_j^2
    b = (sum_q**2 - sum_q2) / 2.0      # sum over pairs of q_i q_j
    one = 1.0 - r * r
    return -0.5 * pairs * np.log(one) - (r * r * a - 2.0 * r * b) / (2.0 * one)


def _golden_max(f, lo: float, hi: float, tol: float = 1e-6) -> float:
    """Golden-section maximizer of a unimodal function on [lo, hi]."""
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def rho_from_r(r: float, mc_samples: int, rng: np.random.Generator) -> float:
    """Monte Carlo map from the copula correlation r to corr(t_i, t_j).

    Pairs are drawn from the bivariate Gaussian copula with exponential
    (rate 1/2) marginals and their sample correlation is returned.
    """
    x1 = rng.standard_normal(mc_samples)
    x2 = r * x1 + np.sqrt(max(1.0 - r * r, 0.0)) * rng.standard_normal(mc_samples)
    t1 = -2.0 * np.log(special.ndtr(-x1))
    t2 = -2.0 * np.log(special.ndtr(-x2))
    return float(np.corrcoef(t1, t2)[0, 1])


def copula_rho(t, mc_samples: int = 100_000, seed: int = 0) -> float:
    """Copula composite-likelihood estimate of the exchangeability level.

    Maximizes the pairwise Gaussian-copula likelihood over r in [0, 0.999]
    by golden-section search, then converts r_hat to a correlation of the
    t-scale variables by simulation, clamping the result to [0, 1).
    """
    t = np.asarray(t, dtype=float).reshape(-1)
    M = t.size
    if M < 2:
        raise ValueError("copula estimation needs at least two values")
    q = _exp_quantiles(t)
    sum_q2 = float((q**2).sum())
    sum_q = float(q.sum())
    r_hat = _golden_max(
        lambda r: _copula_loglik(r, sum_q2, sum_q, M), 0.0, _R_MAX
    )
    if not np.isfinite(r_hat):
        warnings.warn("copula likelihood degenerate; using rho = 0")
        return 0.0
    rho = rho_from_r(r_hat, mc_samples, substream(seed, "rho-map"))
    if not np.isfinite(rho):
        warnings.warn("copula correlation map degenerate; using rho = 0")
        return 0.0
    return float(np.clip(rho, 0.0, _RHO_MAX))


def gamma_params(rho: float, M: int) -> tuple[float, float]:
    """Moment-matched Gamma parameters a = M/(1+(M-1)rho), b = a/(2M)."""
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"rho must lie in [0, 1), got {rho}")
    if M < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    scale = 1.0 + (M - 1) * rho
    return M / scale, 1.0 / (2.0 * scale)


def gamma_sf(T: float, a: float, b: float) -> float:
    """Upper tail P(Gamma(a, rate b) > T) via the regularized incomplete gamma."""
    if T < 0 or a <= 0 or b <= 0:
        raise ValueError("gamma_sf requires T >= 0 and a, b > 0")
    return float(special.gammaincc(a, b * T))


def combine(
    pvalues,
    method: str = "CPL",
    alpha: float = 0.05,
    seed: int = 0,
    mc_samples: int = 100_000,
) -> CombineResult:
    """Combine M p-values by the chosen method and test at level alpha.

    CPL and MOM estimate the exchangeability level and use the Gamma tail;
    FISHER assumes independence (rho = 0); NVE returns the plain average of
    the p-values.  Rejection means p_final < alpha.
    """
    method = method.upper()
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    p = _validate_pvalues(pvalues)
    M = p.size
    T = fisher_T(p)

    if method == "NVE":
        p_final = float(p.mean())
        return CombineResult(T, p_final, method, alpha, p_final < alpha, M=M)

    t = -2.0 * np.log(np.maximum(p, _P_FLOOR))
    if method == "FISHER" or M == 1:
        rho = 0.0
    elif method == "MOM":
        rho = mom_rho(t)
    else:  # CPL
        rho = copula_rho(t, mc_samples=mc_samples, seed=seed)
    a, b = gamma_params(rho, M)
    p_final = float(np.clip(gamma_sf(T, a, b), _P_FLOOR, 1.0))
    return CombineResult(T, p_final, method, alpha, p_final < alpha,
                         rho_hat=rho, a=a, b=b, M=M)
