"""Exact conditional Gaussian simulation of the fine field given aggregates.

Conditioning a zero-mean Gaussian field Z ~ N(0, Sigma) on H Z = z gives

    mean = Sigma H' (H Sigma H')^{-1} z,
    cov  = Sigma - Sigma H' (H Sigma H')^{-1} H Sigma.

``build_conditional`` materializes this law with an explicit low-rank
covariance root (symmetric eigendecomposition, eigenvalues clamped at zero),
which is the right tool for dense covariances of moderate size.

For production-size grids two exact O(n log n)-per-draw samplers avoid the
n x n eigendecomposition by drawing an unconditional field Z* and correcting
it with the kriging residual,

    Z_c = Z* + Sigma H' (H Sigma H')^{-1} (z - H Z*),

which has exactly the conditional law and satisfies H Z_c = z to rounding:
``StationaryConditionalSampler`` (circulant-embedding draws for stationary
families on regular-tile schemes) and ``WaveletConditionalSampler`` (for the
wavelet-diagonal covariance W' V(theta) W).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from ._rng import substream
from .covariance import CovarianceFamily, SchemeCovariance, cov_matrix
from .grid import AggregatedData, Grid2D
from .wavelet import class_labels, forward_flat, inverse_flat

__all__ = [
    "ConditionalLaw",
    "build_conditional",
    "sample",
    "sample_fields",
    "StationaryConditionalSampler",
    "WaveletConditionalSampler",
]


@dataclass(frozen=True, eq=False)
class ConditionalLaw:
    """Gaussian law of the fine field given the aggregated data.

    ``cov_root`` is n x q with cov = cov_root @ cov_root.T; q is the
    numerical rank (0 when the data determine the field completely).
    """

    mean: np.ndarray
    cov_root: np.ndarray
    data: AggregatedData

    @property
    def q(self) -> int:
        return self.cov_root.shape[1]

    def sample_fields(self, M: int, seed: int) -> np.ndarray:
        return sample_fields(self, M, seed)


def build_conditional(
    sigma,
    data: AggregatedData,
    rank_tol: float = 1e-10,
) -> ConditionalLaw:
    """Conditional law from a dense covariance (or family) and aggregated data.

    ``sigma`` is either an n x n covariance matrix or a
    :class:`~latsig.covariance.CovarianceFamily` to densify.  H Sigma H' gets
    an escalating diagonal jitter (with a warning) if it is numerically
    singular; an irrecoverable factorization raises.
    """
    scheme = data.scheme
    n = scheme.n1 * scheme.n2
    if isinstance(sigma, CovarianceFamily):
        sigma = cov_matrix(sigma, scheme.n1, scheme.n2)
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (n, n):
        raise ValueError(f"sigma must be {n}x{n}, got {sigma.shape}")

    H = scheme.h_matrix()
    SHt = sigma @ H.T.toarray()              # (n, K)
    A = np.asarray(H @ SHt)                  # (K, K)
    L, jitter = _chol_with_jitter(A)
    if jitter:
        warnings.warn(
            f"H Sigma H' was singular; added diagonal jitter {jitter:.1e}"
        )
    AinvZ = linalg.cho_solve((L, True), data.values)
    mean = SHt @ AinvZ
    cond = sigma - SHt @ linalg.cho_solve((L, True), SHt.T)
    cond = 0.5 * (cond + cond.T)
    evals, vecs = np.linalg.eigh(cond)
    evals = np.maximum(evals, 0.0)
    # relative cutoff, floored at the rounding level of the subtraction above
    # so that an exactly-determined field (cond == 0 up to rounding) gives q = 0
    rounding = 4.0 * n * np.finfo(float).eps * float(np.abs(sigma).sum(axis=1).max())
    cutoff = max(rank_tol * float(evals[-1]), rounding) if evals.size else 0.0
    keep = evals > cutoff
    root = vecs[:, keep] * np.sqrt(evals[keep])
    return ConditionalLaw(mean, root, data)


def _chol_with_jitter(A: np.ndarray) -> tuple[np.ndarray, float]:
    jitter = 0.0
    scale = float(np.mean(np.diag(A)))
    for attempt in range(6):
        try:
            return linalg.cholesky(
                A + (jitter * np.eye(A.shape[0]) if jitter else 0.0), lower=True
            ), jitter
        except linalg.LinAlgError:
            jitter = scale * 10.0 ** (-10 + attempt)
    raise np.linalg.LinAlgError("H Sigma H' irrecoverably singular")


def sample_fields(law: ConditionalLaw, M: int, seed: int) -> np.ndarray:
    """M conditional draws as an (M, n1, n2) array.

    Draw i uses the substream (seed, "condsim", i), so results do not depend
    on evaluation order or parallel scheduling.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    scheme = law.data.scheme
    out = np.empty((M, scheme.n1, scheme.n2))
    for i in range(M):
        rng = substream(seed, "condsim", i)
        eps = rng.standard_normal(law.q)
        out[i] = (law.mean + law.cov_root @ eps).reshape(scheme.n1, scheme.n2)
    return out


def sample(law: ConditionalLaw, M: int, seed: int) -> list[Grid2D]:
    """M conditional draws as Grid2D values."""
    fields = sample_fields(law, M, seed)
    scheme = law.data.scheme
    return [Grid2D(scheme.n1, scheme.n2, f) for f in fields]


# ---------------------------------------------------------------------------
# kriging-residual samplers (no n x n factorization)


class _KrigingResidualSampler:
    """Shared conditioning logic; subclasses draw exact unconditional fields."""

    def __init__(self, data: AggregatedData, cross: np.ndarray, agg_cov: np.ndarray):
        # cross = Sigma H' (n x K), agg_cov = H Sigma H' (K x K)
        self.data = data
        scheme = data.scheme
        L, jitter = _chol_with_jitter(agg_cov)
        if jitter:
            warnings.warn(
                f"H Sigma H' was singular; added diagonal jitter {jitter:.1e}"
            )
        self._gain = linalg.cho_solve((L, True), cross.T).T   # Sigma H' A^{-1}
        self.mean = self._gain @ data.values
        self._shape = (scheme.n1, scheme.n2)

    def _unconditional(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def sample_fields(self, M: int, seed: int) -> np.ndarray:
        if M < 1:
            raise ValueError("M must be >= 1")
        scheme = self.data.scheme
        out = np.empty((M,) + self._shape)
        for i in range(M):
            rng = substream(seed, "condsim", i)
            z = self._unconditional(rng)
            resid = self.data.values - scheme.block_means(z)
            out[i] = (z + self._gain @ resid).reshape(self._shape)
        return out


def _embedding_spectrum(
    family: CovarianceFamily,
    n1: int,
    n2: int,
    spacing: tuple[float, float],
) -> tuple[np.ndarray, int, int]:
    """Nonnegative FFT spectrum of a periodic embedding of the correlation."""
    last = None
    for pad in (2, 4, 8):
        P1, P2 = pad * n1, pad * n2
        t1 = np.minimum(np.arange(P1), P1 - np.arange(P1)) * spacing[0]
        t2 = np.minimum(np.arange(P2), P2 - np.arange(P2)) * spacing[1]
        kern = family.correlation(np.hypot(t1[:, None], t2[None, :]))
        spec = np.fft.fft2(kern).real
        last = (spec, P1, P2)
        if spec.min() >= -1e-9 * spec.max():
            break
    else:
        warnings.warn(
            "circulant embedding not nonnegative at maximum padding; "
            "clamping small negative eigenvalues"
        )
    spec, P1, P2 = last
    return np.maximum(spec, 0.0), P1, P2


class StationaryConditionalSampler(_KrigingResidualSampler):
    """Exact conditional sampler for a stationary family on a regular scheme.

    Unconditional draws come from circulant embedding (one 2-D FFT per draw);
    the aggregated covariance and cross-covariance come from the offset-table
    engine, so nothing n x n is ever formed.
    """

    def __init__(
        self,
        family: CovarianceFamily,
        data: AggregatedData,
        spacing: tuple[float, float] = (1.0, 1.0),
    ):
        scheme = data.scheme
        engine = SchemeCovariance(scheme, spacing=spacing)
        cross = family.tau2 * engine.omega_ht(family)
        agg = family.tau2 * engine.hoh(family)
        super().__init__(data, cross, agg)
        spec, P1, P2 = _embedding_spectrum(family, scheme.n1, scheme.n2, spacing)
        self._amp = np.sqrt(spec / (P1 * P2))
        self._P = (P1, P2)
        self._tau = np.sqrt(family.tau2)
        self._sqrt_lam = np.sqrt(family.nugget)

    def _unconditional(self, rng: np.random.Generator) -> np.ndarray:
        P1, P2 = self._P
        n1, n2 = self._shape
        xi = rng.standard_normal((P1, P2)) + 1j * rng.standard_normal((P1, P2))
        field = np.fft.fft2(xi * self._amp).real[:n1, :n2].reshape(-1)
        if self._sqrt_lam:
            field = field + self._sqrt_lam * rng.standard_normal(n1 * n2)
        return self._tau * field


class WaveletConditionalSampler(_KrigingResidualSampler):
    """Exact conditional sampler for Sigma = W' V(theta) W.

    theta holds the 3J+1 per-class coefficient variances; unconditional draws
    are inverse transforms of independently scaled coefficients.
    """

    def __init__(
        self,
        theta: np.ndarray,
        data: AggregatedData,
        J: int,
        filter: str = "la8",
    ):
        scheme = data.scheme
        n1, n2 = scheme.n1, scheme.n2
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if theta.size != 3 * J + 1:
            raise ValueError(f"theta must have 3J+1={3*J+1} entries")
        theta_flat = theta[class_labels(n1, n2, J) - 1]
        Hd = scheme.h_matrix().toarray()                      # (K, n)
        U = forward_flat(Hd.reshape(-1, n1, n2), J, filter)   # rows: (W H')_k
        agg = (U * theta_flat) @ U.T
        cross = inverse_flat(theta_flat * U, n1, n2, J, filter).reshape(scheme.K, -1).T
        super().__init__(data, cross, agg)
        self._sqrt_theta = np.sqrt(theta_flat)
        self._J = J
        self._filter = filter

    def _unconditional(self, rng: np.random.Generator) -> np.ndarray:
        n1, n2 = self._shape
        coeffs = self._sqrt_theta * rng.standard_normal(n1 * n2)
        return inverse_flat(coeffs, n1, n2, self._J, self._filter).reshape(-1)
