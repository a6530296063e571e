"""Stationary covariance families, ML fitting from aggregated data, and
projection to wavelet-class variances.

Fitting works entirely through the aggregated covariance H Omega(gamma) H':
the correlation-scale parameters gamma are estimated by minimizing the
negative log profile likelihood

    0.5 log|H Omega H'| + (K/2) log( z' (H Omega H')^{-1} z ),

after which the stationary variance is tau2 = z' (H Omega H')^{-1} z / K and
the per-class wavelet variances are theta_k = (tau2/n_k) tr(W_k Omega W_k').

For regular-tile schemes every block is a translate of the same shape, so
H Omega H' and Omega H' depend on the correlation function only through a
small table of lattice offsets; evaluation is then O(K^2) gathers instead of
an n x n densification.  The same idea turns the class traces into a dot
product against per-class offset histograms of the wavelet basis, computed
once per (shape, J, filter).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from math import gamma as gamma_fn

import numpy as np
from scipy import linalg, optimize, special

from .grid import AggregatedData, AggregationScheme
from .wavelet import class_labels, class_slices, forward_flat, inverse_flat

__all__ = [
    "KINDS",
    "CovarianceFamily",
    "FittedCovariance",
    "cov_matrix",
    "ml_fit",
    "negative_log_profile_likelihood",
    "SchemeCovariance",
    "class_variances_stationary",
    "class_variances_dense",
    "class_offset_tables",
]

KINDS = ("white", "exponential", "exp-nugget", "matern-nugget")

DEFAULT_MAX_DENSE_N = 8192


@dataclass(frozen=True)
class CovarianceFamily:
    """A stationary covariance C(u) = tau2 * (corr(|u|) + lam * 1{u = 0}).

    ``phi`` is the spatial scale, ``nu`` the Matern smoothness, ``lam`` the
    nugget fraction.  The white kind is the phi -> 0 convention: correlation
    is the identity and no parameters are free.
    """

    kind: str
    tau2: float = 1.0
    phi: float | None = None
    nu: float | None = None
    lam: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown covariance kind {self.kind!r}; choose from {KINDS}")
        if not self.tau2 > 0:
            raise ValueError(f"tau2 must be positive, got {self.tau2}")
        if self.kind != "white":
            if self.phi is None or not self.phi > 0:
                raise ValueError(f"{self.kind} needs a positive spatial scale phi")
        if self.kind in ("exp-nugget", "matern-nugget"):
            if self.lam is None or self.lam < 0:
                raise ValueError(f"{self.kind} needs a nugget lam >= 0")
        if self.kind == "matern-nugget":
            if self.nu is None or not self.nu > 0:
                raise ValueError("matern-nugget needs a positive smoothness nu")

    @property
    def nugget(self) -> float:
        return 0.0 if self.lam is None else float(self.lam)

    def correlation(self, dist: np.ndarray) -> np.ndarray:
        """Continuous correlation part at the given distances (no nugget)."""
        d = np.asarray(dist, dtype=float)
        if self.kind == "white":
            return (d == 0).astype(float)
        if self.kind in ("exponential", "exp-nugget"):
            return np.exp(-d / self.phi)
        # Matern: 2^{1-nu}/Gamma(nu) * x^nu K_nu(x), x = sqrt(2 nu) d / phi
        nu = float(self.nu)
        x = np.sqrt(2.0 * nu) * d / self.phi
        out = np.ones_like(x)
        pos = x > 0
        xp = x[pos]
        out[pos] = (2.0 ** (1.0 - nu) / gamma_fn(nu)) * xp**nu * special.kv(nu, xp)
        return out

    def free_parameters(self) -> dict[str, float]:
        out = {}
        if self.kind != "white":
            out["phi"] = float(self.phi)
        if self.kind in ("exp-nugget", "matern-nugget"):
            out["lam"] = float(self.lam)
        if self.kind == "matern-nugget":
            out["nu"] = float(self.nu)
        return out


@dataclass(frozen=True, eq=False)
class FittedCovariance:
    """A fitted family together with the wavelet-class variances."""

    family: CovarianceFamily
    theta: np.ndarray
    J: int
    filter: str
    converged: bool = True
    nll: float = float("nan")

    def __post_init__(self) -> None:
        th = np.asarray(self.theta, dtype=float).reshape(-1)
        if th.size != 3 * self.J + 1:
            raise ValueError(f"theta must have 3J+1={3*self.J+1} entries, got {th.size}")
        if np.any(th <= 0):
            raise ValueError("all class variances must be positive")
        th.flags.writeable = False
        object.__setattr__(self, "theta", th)

    def to_dict(self) -> dict:
        fam = self.family
        return {
            "kind": fam.kind,
            "tau2": fam.tau2,
            "phi": fam.phi,
            "nu": fam.nu,
            "lam": fam.lam,
            "theta": self.theta.tolist(),
            "J": self.J,
            "filter": self.filter,
            "converged": bool(self.converged),
            "nll": float(self.nll),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FittedCovariance":
        fam = CovarianceFamily(
            kind=d["kind"], tau2=d["tau2"], phi=d.get("phi"),
            nu=d.get("nu"), lam=d.get("lam"),
        )
        return cls(fam, np.asarray(d["theta"], dtype=float), int(d["J"]),
                   d["filter"], bool(d.get("converged", True)),
                   float(d.get("nll", float("nan"))))


# ---------------------------------------------------------------------------
# lattice geometry caches

_DIST_CACHE: dict[tuple, np.ndarray] = {}
_OFFSET_CACHE: dict[tuple, np.ndarray] = {}


def _lattice_coords(n1: int, n2: int, spacing: tuple[float, float]) -> np.ndarray:
    rows = np.repeat(np.arange(n1), n2) * spacing[0]
    cols = np.tile(np.arange(n2), n1) * spacing[1]
    return np.column_stack([rows, cols])


def _distance_matrix(n1: int, n2: int, spacing: tuple[float, float]) -> np.ndarray:
    key = (n1, n2, spacing)
    if key not in _DIST_CACHE:
        if len(_DIST_CACHE) > 3:
            _DIST_CACHE.clear()
        coords = _lattice_coords(n1, n2, spacing)
        d = np.hypot(
            coords[:, 0][:, None] - coords[:, 0][None, :],
            coords[:, 1][:, None] - coords[:, 1][None, :],
        )
        d.flags.writeable = False
        _DIST_CACHE[key] = d
    return _DIST_CACHE[key]


def _offset_distances(n1: int, n2: int, spacing: tuple[float, float]) -> np.ndarray:
    """Distances on the (2n1-1) x (2n2-1) lattice-offset grid."""
    key = (n1, n2, spacing)
    if key not in _OFFSET_CACHE:
        di = np.arange(-(n1 - 1), n1) * spacing[0]
        dj = np.arange(-(n2 - 1), n2) * spacing[1]
        d = np.hypot(di[:, None], dj[None, :])
        d.flags.writeable = False
        _OFFSET_CACHE[key] = d
    return _OFFSET_CACHE[key]


def cov_matrix(
    family: CovarianceFamily,
    n1: int,
    n2: int,
    spacing: tuple[float, float] = (1.0, 1.0),
    max_n: int = DEFAULT_MAX_DENSE_N,
) -> np.ndarray:
    """Dense n x n covariance of the lattice, Sigma_ij = C(s_i - s_j)."""
    n = n1 * n2
    if n > max_n:
        raise ValueError(
            f"refusing to densify a {n}x{n} covariance (guard max_n={max_n})"
        )
    omega = family.correlation(_distance_matrix(n1, n2, spacing)).copy()
    if family.nugget:
        omega[np.diag_indices(n)] += family.nugget
    return family.tau2 * omega


# ---------------------------------------------------------------------------
# aggregated-covariance evaluation engines


def _window_mean(a: np.ndarray, w1: int, w2: int) -> np.ndarray:
    """Means of all w1 x w2 windows of ``a`` (valid mode), via cumsums."""
    if w1 == 1 and w2 == 1:
        return a
    P = np.zeros((a.shape[0] + 1, a.shape[1] + 1))
    np.cumsum(np.cumsum(a, axis=0), axis=1, out=P[1:, 1:])
    S = P[w1:, w2:] - P[:-w1, w2:] - P[w1:, :-w2] + P[:-w1, :-w2]
    return S / (w1 * w2)


class SchemeCovariance:
    """H Omega H' and Omega H' for a fixed scheme and varying family.

    Regular-tile schemes with at most ``max_fast_K`` blocks use offset
    tables (exact, no densification); anything else falls back to a dense
    n x n correlation matrix, guarded at ``max_n`` pixels.
    """

    def __init__(
        self,
        scheme: AggregationScheme,
        spacing: tuple[float, float] = (1.0, 1.0),
        max_n: int = DEFAULT_MAX_DENSE_N,
        max_fast_K: int = 2048,
    ):
        self.scheme = scheme
        self.spacing = spacing
        self.fast = scheme.is_regular and scheme.K <= max_fast_K
        n1, n2 = scheme.n1, scheme.n2
        if self.fast:
            b1, b2 = scheme.block_shape
            c1 = scheme.corners[:, 0]
            c2 = scheme.corners[:, 1]
            self._b = (b1, b2)
            # block-block gather: corner differences, offset to table indices
            self._bb_i1 = (c1[:, None] - c1[None, :]) + (n1 - b1)
            self._bb_i2 = (c2[:, None] - c2[None, :]) + (n2 - b2)
            # pixel-block gather: pixel minus corner
            p1 = np.repeat(np.arange(n1), n2)
            p2 = np.tile(np.arange(n2), n1)
            self._pb_i1 = (p1[:, None] - c1[None, :]) + (n1 - b1)
            self._pb_i2 = (p2[:, None] - c2[None, :]) + (n2 - b2)
            self._inside = (
                (p1[:, None] >= c1[None, :]) & (p1[:, None] < c1[None, :] + b1)
                & (p2[:, None] >= c2[None, :]) & (p2[:, None] < c2[None, :] + b2)
            )
        else:
            n = n1 * n2
            if n > max_n:
                raise ValueError(
                    f"scheme needs dense covariance handling but n={n} exceeds "
                    f"the max_n={max_n} guard"
                )
            self._H = scheme.h_matrix()
            self._D = _distance_matrix(n1, n2, spacing)

    def _tables(self, family: CovarianceFamily) -> tuple[np.ndarray, np.ndarray]:
        n1, n2 = self.scheme.n1, self.scheme.n2
        b1, b2 = self._b
        c_off = family.correlation(_offset_distances(n1, n2, self.spacing))
        F = _window_mean(c_off, b1, b2)          # pixel-to-block
        G = _window_mean(F, b1, b2)              # block-to-block
        return F, G

    def hoh(self, family: CovarianceFamily) -> np.ndarray:
        """H Omega(family) H' on the correlation scale (tau2 excluded)."""
        if self.fast:
            _, G = self._tables(family)
            A = G[self._bb_i1, self._bb_i2]
            if family.nugget:
                b1, b2 = self._b
                A = A + (family.nugget / (b1 * b2)) * np.eye(self.scheme.K)
            return A
        omega = family.correlation(self._D)
        if family.nugget:
            omega = omega + family.nugget * np.eye(omega.shape[0])
        return np.asarray((self._H @ omega) @ self._H.T.toarray())

    def omega_ht(self, family: CovarianceFamily) -> np.ndarray:
        """Omega(family) H' (n x K) on the correlation scale."""
        if self.fast:
            F, _ = self._tables(family)
            C = F[self._pb_i1, self._pb_i2]
            if family.nugget:
                b1, b2 = self._b
                C = C + (family.nugget / (b1 * b2)) * self._inside
            return C
        omega = family.correlation(self._D)
        if family.nugget:
            omega = omega + family.nugget * np.eye(omega.shape[0])
        return omega @ self._H.T.toarray()


def _chol_with_jitter(A: np.ndarray, warn_label: str) -> tuple[np.ndarray, float]:
    """Cholesky factor of A, adding escalating diagonal jitter if needed."""
    jitter = 0.0
    scale = float(np.mean(np.diag(A)))
    for attempt in range(6):
        try:
            return linalg.cholesky(
                A + (jitter * np.eye(A.shape[0]) if jitter else 0.0), lower=True
            ), jitter
        except linalg.LinAlgError:
            jitter = scale * 10.0 ** (-10 + attempt)
    raise np.linalg.LinAlgError(f"{warn_label}: matrix irrecoverably singular")


def negative_log_profile_likelihood(
    data: AggregatedData,
    family: CovarianceFamily,
    engine: SchemeCovariance | None = None,
) -> tuple[float, float]:
    """(profile nll, profiled tau2) at the given correlation parameters.

    The returned nll is 0.5 log|H Omega H'| + (K/2) log(z' (H Omega H')^{-1} z),
    constants dropped; tau2 is the profiled variance z'(H Omega H')^{-1} z / K.
    """
    engine = engine or SchemeCovariance(data.scheme)
    A = engine.hoh(family)
    L, jitter = _chol_with_jitter(A, "aggregated covariance")
    if jitter:
        warnings.warn(
            f"aggregated covariance was singular; added diagonal jitter {jitter:.1e}"
        )
    logdet = 2.0 * float(np.log(np.diag(L)).sum())
    w = linalg.solve_triangular(L, data.values, lower=True)
    quad = float(w @ w)
    K = data.K
    nll = 0.5 * logdet + 0.5 * K * np.log(max(quad, 1e-300))
    return nll, quad / K


_FIT_BOUNDS = {"phi": (1e-2, 1e3), "lam": (1e-8, 1e2), "nu": (0.05, 5.0)}


def ml_fit(
    data: AggregatedData,
    kind: str = "exponential",
    J: int = 2,
    filter: str = "la8",
    spacing: tuple[float, float] = (1.0, 1.0),
    phi_starts: tuple[float, ...] = (1.0, 5.0, 20.0),
    tol: float = 1e-6,
) -> FittedCovariance:
    """Fit the covariance family to aggregated data under a zero mean.

    Correlation parameters are found by multi-start Nelder-Mead on the log
    scale; the variance is profiled out in closed form.  The wavelet-class
    variances theta_k = (tau2/n_k) tr(W_k Omega W_k') are attached to the
    result.  Non-convergence keeps the best point found and clears the
    ``converged`` flag with a warning.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown covariance kind {kind!r}; choose from {KINDS}")
    if data.K < 2:
        raise ValueError("fitting needs at least two aggregated values")
    engine = SchemeCovariance(data.scheme, spacing=spacing)
    scheme = data.scheme

    if kind == "white":
        family = CovarianceFamily("white")
        nll, tau2 = negative_log_profile_likelihood(data, family, engine)
        fitted = replace(family, tau2=tau2)
        theta = class_variances_stationary(fitted, scheme.n1, scheme.n2, J, filter, spacing)
        return FittedCovariance(fitted, theta, J, filter, converged=True, nll=nll)

    names = ["phi"]
    if kind in ("exp-nugget", "matern-nugget"):
        names.append("lam")
    if kind == "matern-nugget":
        names.append("nu")

    def make_family(x: np.ndarray) -> CovarianceFamily:
        params = {}
        for name, xi in zip(names, x):
            lo, hi = _FIT_BOUNDS[name]
            params[name] = float(np.clip(np.exp(xi), lo, hi))
        if kind == "exponential":
            return CovarianceFamily(kind, phi=params["phi"])
        if kind == "exp-nugget":
            return CovarianceFamily(kind, phi=params["phi"], lam=params["lam"])
        return CovarianceFamily(kind, phi=params["phi"], lam=params["lam"],
                                nu=params["nu"])

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # jitter warnings repeat during search

        def objective(x: np.ndarray) -> float:
            try:
                nll, _ = negative_log_profile_likelihood(data, make_family(x), engine)
            except np.linalg.LinAlgError:
                return 1e12
            # keep the simplex inside the box without flattening the surface
            excess = np.abs(x - np.clip(x, -12.0, 12.0)).sum()
            return nll + 1e3 * excess**2

        best = None
        any_success = False
        for phi0 in phi_starts:
            x0 = [np.log(phi0)]
            if "lam" in names:
                x0.append(np.log(0.1))
            if "nu" in names:
                x0.append(np.log(0.5))
            res = optimize.minimize(
                objective, np.array(x0), method="Nelder-Mead",
                options=dict(fatol=tol, xatol=1e-4, maxiter=400),
            )
            any_success = any_success or bool(res.success)
            if best is None or res.fun < best.fun:
                best = res

    converged = bool(any_success and np.isfinite(best.fun))
    if not converged:
        warnings.warn("covariance fit did not converge; reporting best point found")
    family = make_family(best.x)
    nll, tau2 = negative_log_profile_likelihood(data, family, engine)
    fitted = replace(family, tau2=tau2)
    theta = class_variances_stationary(fitted, scheme.n1, scheme.n2, J, filter, spacing)
    return FittedCovariance(fitted, theta, J, filter, converged=converged, nll=nll)


# ---------------------------------------------------------------------------
# wavelet-class variances


_CLASS_TABLE_CACHE: dict[tuple, tuple[np.ndarray, ...]] = {}


def class_offset_tables(
    n1: int, n2: int, J: int, filter: str = "la8", chunk: int = 256
) -> tuple[np.ndarray, ...]:
    """Per-class offset histograms G_k of the wavelet basis.

    G_k[d1, d2] sums, over the class-k basis functions, the lag-(d1, d2)
    products of their pixel values, so that
    tr(W_k Omega W_k') = sum_d G_k[d] * corr(d) for any stationary Omega.
    Tables are (2n1-1) x (2n2-1) and cached per (shape, J, filter).
    """
    key = (n1, n2, J, filter)
    if key in _CLASS_TABLE_CACHE:
        return _CLASS_TABLE_CACHE[key]
    n = n1 * n2
    labels = class_labels(n1, n2, J)
    nclasses = 3 * J + 1
    P1, P2 = 2 * n1, 2 * n2
    acc = np.zeros((nclasses, P1, P2 // 2 + 1))
    for start in range(0, n, chunk):
        idx = np.arange(start, min(start + chunk, n))
        unit = np.zeros((idx.size, n))
        unit[np.arange(idx.size), idx] = 1.0
        imgs = inverse_flat(unit, n1, n2, J, filter)
        power = np.abs(np.fft.rfft2(imgs, s=(P1, P2))) ** 2
        for k in np.unique(labels[idx]):
            acc[k - 1] += power[labels[idx] == k].sum(axis=0)
    tables = []
    di = np.arange(-(n1 - 1), n1) % P1
    dj = np.arange(-(n2 - 1), n2) % P2
    for k in range(nclasses):
        auto = np.fft.irfft2(acc[k], s=(P1, P2))
        tables.append(np.ascontiguousarray(auto[np.ix_(di, dj)]))
    out = tuple(tables)
    _CLASS_TABLE_CACHE[key] = out
    return out


def class_variances_stationary(
    family: CovarianceFamily,
    n1: int,
    n2: int,
    J: int,
    filter: str = "la8",
    spacing: tuple[float, float] = (1.0, 1.0),
) -> np.ndarray:
    """theta_k = (tau2/n_k) tr(W_k Omega W_k') for a stationary family."""
    tables = class_offset_tables(n1, n2, J, filter)
    c_off = family.correlation(_offset_distances(n1, n2, spacing))
    sizes = [sl.stop - sl.start for sl in class_slices(n1, n2, J)]
    theta = np.empty(3 * J + 1)
    for k, (G, n_k) in enumerate(zip(tables, sizes)):
        tr = float((G * c_off).sum()) + family.nugget * n_k
        theta[k] = family.tau2 * tr / n_k
    return theta


def class_variances_dense(
    sigma: np.ndarray, n1: int, n2: int, J: int, filter: str = "la8",
    chunk: int = 512,
) -> np.ndarray:
    """Per-class means of diag(W Sigma W') for an arbitrary dense Sigma.

    Sigma's rows/columns are in row-major pixel order.  This is the operator
    application route: the DWT is applied to the columns of Sigma and then to
    the rows of the result, never materializing W.
    """
    n = n1 * n2
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (n, n):
        raise ValueError(f"Sigma must be {n}x{n} for a {n1}x{n2} grid")
    # columns of W Sigma, then rows transformed chunk by chunk for the diagonal
    wsig_t = forward_flat(sigma.T.reshape(n, n1, n2), J, filter)  # (W Sigma)'
    diag = np.empty(n)
    for start in range(0, n, chunk):
        rows = np.arange(start, min(start + chunk, n))
        block = forward_flat(
            wsig_t.T[rows].reshape(rows.size, n1, n2), J, filter
        )
        diag[rows] = block[np.arange(rows.size), rows]
    slices = class_slices(n1, n2, J)
    return np.array([float(diag[sl].mean()) for sl in slices])
