"""Single-image enhanced FDR test in the wavelet domain.

The test transforms the image, standardizes each coefficient class by a
robust scale, ranks hypotheses by the strength of each coefficient's wavelet
neighborhood, and tests the best-ranked ``n_tests`` coefficients with a
Benjamini-Hochberg step-up.  The reported p-value is the smallest
FDR-adjusted p-value of the tested set: the strictest FDR level at which
anything is rejected.  A signal estimate is reconstructed by inverting the
transform with the original coefficients kept at rejected positions and zero
elsewhere.

Two calibration rules keep the level of the test under spatially correlated
noise, where naive choices fail badly (measured on 64x64 pure-noise fields
with exponential correlation, range 10: rejection rate 1.00 at alpha=0.05
instead of 0.05):

* Coefficients whose periodized filter support wraps around the image edge
  mix unrelated corners of a non-periodic field and carry excess variance;
  they are excluded from testing (they still contribute to neighborhoods).
* The adjusted p-values use the full count of testable coefficients, not the
  ``n_tests`` of the reduced set.  The resulting statistic dominates the
  Simes statistic over all testable coefficients no matter how the reduced
  set was selected, so the data-driven ranking cannot break the level; the
  ranking only decides which coefficients get a chance to reject.

Per-coefficient p-values are two-sided Student-t rather than Gaussian: the
class scale is estimated, and at the extreme quantiles the multiplicity
adjustment probes, scale noise inflates Gaussian tails by the factor
exp(z^4/(4 df)).  The effective degrees of freedom of a MAD-based scale are
about 0.37 of the sample size (its asymptotic efficiency at the Gaussian).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import special

from ._rng import substream
from .grid import Grid2D
from .wavelet import (
    FILTERS,
    WaveletPyramid,
    class_labels,
    class_slices,
    dwt2,
    inverse_flat,
)

__all__ = [
    "EfdrConfig",
    "EfdrResult",
    "standardize",
    "order_hypotheses",
    "bh_reject",
    "smallest_adjusted_p",
    "efdr_test",
    "interior_mask",
]

MAD_TO_SIGMA = 1.4826
MAD_EFFICIENCY = 0.37  # Gaussian efficiency of the MAD scale estimate


@dataclass(frozen=True)
class EfdrConfig:
    """Settings of the single-image test.

    ``n_tests`` is the number of best-ranked coefficients given a chance to
    reject; None tests every eligible coefficient.  ``tail`` picks the
    per-coefficient reference distribution: "student" accounts for the
    estimated class scales and makes the standalone test hold its level
    under any noise correlation; "normal" is the plain Gaussian tail, whose
    p-values are closer to uniform and suit consumers that calibrate the
    dependence themselves (the conditional-simulation pipeline).
    """

    J: int = 2
    filter: str = "la8"
    n_tests: int | None = 100
    alpha: float = 0.05
    w: float = 0.5
    standardizer: str = "mad"
    tail: str = "student"
    test_smooth: bool = True
    exclude_boundary: bool = True
    use_gdf: bool = False
    gdf_candidates: tuple[int, ...] = (25, 50, 100, 200)
    gdf_perturbations: int = 20
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_tests is not None and self.n_tests < 1:
            raise ValueError("n_tests must be >= 1 (or None for all)")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if not 0.0 <= self.w <= 1.0:
            raise ValueError("neighbor weight w must lie in [0, 1]")
        if self.standardizer not in ("mad", "stddev"):
            raise ValueError("standardizer must be 'mad' or 'stddev'")
        if self.tail not in ("student", "normal"):
            raise ValueError("tail must be 'student' or 'normal'")


@dataclass(frozen=True, eq=False)
class EfdrResult:
    p_value: float
    mu_hat: Grid2D
    rejected: np.ndarray        # canonical flat coefficient indices
    z_scores: np.ndarray        # standardized coefficients, flat layout
    scales: np.ndarray          # per-class scale estimates
    n_tested: int


# ---------------------------------------------------------------------------
# standardization


def _class_scale(x: np.ndarray, method: str) -> float:
    """Robust within-class scale; 0 signals a degenerate class."""
    if x.size < 2:
        return 0.0
    if method == "mad":
        s = MAD_TO_SIGMA * float(np.median(np.abs(x - np.median(x))))
        if s > 0.0:
            return s
        # mad breaks down when over half the class is identical; fall back
        return float(np.std(x, ddof=1))
    return float(np.std(x, ddof=1))


def _standardize_flat(
    flat: np.ndarray,
    slices: list[slice],
    method: str,
    scale_mask: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """z-scores, per-class scales, and per-class scale sample sizes."""
    z = np.empty_like(flat)
    scales = np.empty(len(slices))
    counts = np.empty(len(slices), dtype=np.int64)
    for k, sl in enumerate(slices):
        x = flat[sl]
        if scale_mask is not None and scale_mask[sl].sum() >= 2:
            pool = x[scale_mask[sl]]
        else:
            pool = x
        counts[k] = pool.size
        s = _class_scale(pool, method)
        scales[k] = s
        if s == 0.0:
            warnings.warn(
                f"wavelet class {k + 1} has zero scale; its z-scores are set to 0"
            )
            z[sl] = 0.0
        else:
            z[sl] = x / s
    return z, scales, counts


def standardize(
    pyramid: WaveletPyramid, method: str = "mad"
) -> tuple[WaveletPyramid, np.ndarray]:
    """Divide each coefficient class by its robust scale estimate.

    Returns the z-score pyramid and the per-class scales.  Classes whose
    scale estimate degenerates to zero get z = 0 with a warning.
    """
    slices = class_slices(pyramid.n1, pyramid.n2, pyramid.J)
    z, scales, _ = _standardize_flat(pyramid.flat(), slices, method)
    return pyramid.with_flat(z), scales


# ---------------------------------------------------------------------------
# boundary handling

_INTERIOR_CACHE: dict[tuple, np.ndarray] = {}


def _support_length(s: int, L: int) -> int:
    # pixel support of a level-s coefficient for filter length L
    return (1 << s) * (L - 1) - (L - 2)


def interior_mask(n1: int, n2: int, J: int, filter: str) -> np.ndarray:
    """Flat boolean mask of coefficients whose pixel support does not wrap."""
    L = FILTERS[filter].size
    key = (n1, n2, J, L)
    if key in _INTERIOR_CACHE:
        return _INTERIOR_CACHE[key]
    slices = class_slices(n1, n2, J)
    mask = np.zeros(n1 * n2, dtype=bool)

    def axis_interior(n: int, s: int) -> np.ndarray:
        size = n >> s
        last = (n - _support_length(s, L)) // (1 << s)
        out = np.zeros(size, dtype=bool)
        if last >= 0:
            out[: min(last + 1, size)] = True
        return out

    for s in range(1, J + 1):
        band = np.outer(axis_interior(n1, s), axis_interior(n2, s)).reshape(-1)
        for m in range(3):
            mask[slices[3 * (s - 1) + m]] = band
    mask[slices[-1]] = np.outer(
        axis_interior(n1, J), axis_interior(n2, J)
    ).reshape(-1)
    mask.flags.writeable = False
    _INTERIOR_CACHE[key] = mask
    return mask


# ---------------------------------------------------------------------------
# wavelet neighborhood graph (detail coefficients only)

_NEIGHBOR_CACHE: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}


def _neighbor_table(n1: int, n2: int, J: int) -> tuple[np.ndarray, np.ndarray]:
    """(padded neighbor-index matrix, neighbor counts) for every coefficient.

    Neighbors of a detail coefficient at scale -s, orientation m, position
    (i, j): the parent at scale -(s+1) and (i//2, j//2); the four children at
    scale -(s-1); the periodic spatial neighbors in the same subband
    (deduplicated, self excluded); and the two other orientations at the same
    scale and position.  Smooth coefficients have no neighborhood; they are
    scored by their own squared z-score.
    """
    key = (n1, n2, J)
    if key in _NEIGHBOR_CACHE:
        return _NEIGHBOR_CACHE[key]
    slices = class_slices(n1, n2, J)
    starts = [sl.start for sl in slices]

    def detail_start(s: int, m: int) -> int:  # m in 0..2
        return starts[3 * (s - 1) + m]

    neighbor_lists: list[list[int]] = [[] for _ in range(n1 * n2)]

    for s in range(1, J + 1):
        r, c = n1 >> s, n2 >> s
        for m in range(3):
            base = detail_start(s, m)
            for i in range(r):
                for j in range(c):
                    gid = base + i * c + j
                    nbrs: set[int] = set()
                    for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                        pos = base + ((i + di) % r) * c + ((j + dj) % c)
                        if pos != gid:
                            nbrs.add(pos)
                    for m2 in range(3):
                        if m2 != m:
                            nbrs.add(detail_start(s, m2) + i * c + j)
                    if s < J:
                        pc = n2 >> (s + 1)
                        nbrs.add(detail_start(s + 1, m) + (i // 2) * pc + (j // 2))
                    if s > 1:
                        cc = n2 >> (s - 1)
                        for a in (0, 1):
                            for b in (0, 1):
                                nbrs.add(
                                    detail_start(s - 1, m)
                                    + (2 * i + a) * cc
                                    + (2 * j + b)
                                )
                    neighbor_lists[gid] = sorted(nbrs)

    counts = np.array([len(ns) for ns in neighbor_lists], dtype=np.int64)
    width = max(1, counts.max())
    table = np.full((n1 * n2, width), -1, dtype=np.int64)
    for gid, ns in enumerate(neighbor_lists):
        table[gid, : len(ns)] = ns
    _NEIGHBOR_CACHE[key] = (table, counts)
    return table, counts


def neighborhood_scores(z_flat: np.ndarray, n1: int, n2: int, J: int,
                        w: float) -> np.ndarray:
    """w z_i^2 + (1-w) mean of squared z over N(i); z_i^2 for the smooth class."""
    table, counts = _neighbor_table(n1, n2, J)
    z2 = z_flat**2
    padded = np.concatenate([z2, [0.0]])  # -1 padding hits the trailing zero
    nbr_sum = padded[table].sum(axis=1)
    scores = np.where(
        counts > 0,
        w * z2 + (1.0 - w) * nbr_sum / np.maximum(counts, 1),
        z2,
    )
    return scores


def order_hypotheses(z_pyramid: WaveletPyramid, w: float = 0.5) -> np.ndarray:
    """Coefficient indices sorted by descending neighborhood score.

    Ties break by ascending coefficient index (stable sort on the negated
    scores).
    """
    z = z_pyramid.flat()
    scores = neighborhood_scores(z, z_pyramid.n1, z_pyramid.n2, z_pyramid.J, w)
    return np.argsort(-scores, kind="stable")


# ---------------------------------------------------------------------------
# FDR machinery


def bh_reject(pvalues, alpha: float, m_total: int | None = None) -> np.ndarray:
    """Benjamini-Hochberg step-up: indices of rejected hypotheses.

    Sort ascending, find the largest i with p_(i) <= i alpha / m, and reject
    everything at or below that p-value.  ``m_total`` overrides the
    multiplicity m (it defaults to the list length) for step-up over a
    subset of a larger family.
    """
    p = np.asarray(pvalues, dtype=float).reshape(-1)
    if p.size == 0:
        return np.array([], dtype=np.int64)
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size if m_total is None else int(m_total)
    order = np.argsort(p, kind="stable")
    sorted_p = p[order]
    ok = sorted_p <= (np.arange(1, p.size + 1) * alpha / m)
    if not ok.any():
        return np.array([], dtype=np.int64)
    k = int(np.max(np.nonzero(ok)[0]))
    return np.sort(order[: k + 1])


def smallest_adjusted_p(pvalues, m_total: int | None = None) -> float:
    """min_i p_(i) m / i: the smallest FDR level with at least one rejection."""
    p = np.asarray(pvalues, dtype=float).reshape(-1)
    if p.size == 0:
        raise ValueError("need at least one p-value")
    m = p.size if m_total is None else int(m_total)
    sorted_p = np.sort(p)
    adj = sorted_p * m / np.arange(1, p.size + 1)
    return float(np.clip(adj.min(), 1e-300, 1.0))


# ---------------------------------------------------------------------------
# the test itself


def _eligibility(n1: int, n2: int, config: EfdrConfig) -> np.ndarray:
    slices = class_slices(n1, n2, config.J)
    if config.exclude_boundary:
        mask = interior_mask(n1, n2, config.J, config.filter).copy()
    else:
        mask = np.ones(n1 * n2, dtype=bool)
    if not config.test_smooth:
        mask[slices[-1]] = False
    return mask


def _eligible_order(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    masked = np.where(mask, scores, -np.inf)
    order = np.argsort(-masked, kind="stable")
    return order[: int(mask.sum())]


def _coef_pvalues(z_sel: np.ndarray, sel: np.ndarray, labels: np.ndarray,
                  scale_counts: np.ndarray, config: EfdrConfig) -> np.ndarray:
    """Two-sided p-values, Student-t by default to absorb scale-estimation noise."""
    if config.tail == "normal":
        return 2.0 * special.ndtr(-np.abs(z_sel))
    eff = MAD_EFFICIENCY if config.standardizer == "mad" else 1.0
    df = np.maximum(eff * scale_counts[labels[sel] - 1] - 1.0, 2.0)
    return 2.0 * special.stdtr(df, -np.abs(z_sel))


def _run_fixed(flat, order, z, labels, scale_counts, n_tests, m_total, config):
    sel = order[:n_tests]
    pvals = _coef_pvalues(z[sel], sel, labels, scale_counts, config)
    p_value = smallest_adjusted_p(pvals, m_total=m_total)
    rejected = np.sort(sel[bh_reject(pvals, config.alpha, m_total=m_total)])
    return p_value, rejected


def _reconstruct(flat: np.ndarray, rejected: np.ndarray, n1: int, n2: int,
                 J: int, filt: str) -> Grid2D:
    kept = np.zeros_like(flat)
    kept[rejected] = flat[rejected]
    return Grid2D(n1, n2, inverse_flat(kept, n1, n2, J, filt))


def efdr_test(grid, config: EfdrConfig = EfdrConfig()) -> EfdrResult:
    """Enhanced-FDR test of zero mean for a single complete image."""
    pyr = dwt2(grid, config.J, config.filter)
    n1, n2 = pyr.n1, pyr.n2
    slices = class_slices(n1, n2, config.J)
    labels = class_labels(n1, n2, config.J)
    flat = pyr.flat()
    mask = _eligibility(n1, n2, config)
    if not mask.any():
        raise ValueError(
            f"no testable coefficients for a {n1}x{n2} grid at J={config.J} "
            f"with the {config.filter} filter"
        )
    m_total = int(mask.sum())
    z, scales, counts = _standardize_flat(
        flat, slices, config.standardizer,
        scale_mask=mask if config.exclude_boundary else None,
    )
    scores = neighborhood_scores(z, n1, n2, config.J, config.w)
    order = _eligible_order(scores, mask)

    if config.use_gdf:
        n_tests = _gdf_select(flat, order, z, scales, counts, labels,
                              n1, n2, mask, m_total, config)
    else:
        n_tests = order.size if config.n_tests is None else config.n_tests
    n_tests = min(n_tests, order.size)

    p_value, rejected = _run_fixed(flat, order, z, labels, counts,
                                   n_tests, m_total, config)
    mu_hat = _reconstruct(flat, rejected, n1, n2, config.J, config.filter)
    return EfdrResult(p_value, mu_hat, rejected, z, scales, n_tests)


def _gdf_select(flat, order, z, scales, counts, labels, n1, n2, mask, m_total,
                config: EfdrConfig) -> int:
    """Ye's generalized-degrees-of-freedom choice of the number of tests.

    The reconstruction is perturbed with R Gaussian fields of size 0.1 sigma
    and the divergence is estimated from the covariance of the perturbations
    with the perturbed fits; the candidate minimizing
    residual^2 + 2 sigma^2 gdf wins.
    """
    n = flat.size
    sigma = float(np.median(scales[:3]))  # finest-scale noise proxy
    if sigma == 0.0:
        return config.n_tests
    tau = 0.1 * sigma
    slices = class_slices(n1, n2, config.J)
    base = {}
    for m in config.gdf_candidates:
        _, rejected = _run_fixed(flat, order, z, labels, counts,
                                 min(m, order.size), m_total, config)
        mu = np.zeros_like(flat)
        mu[rejected] = flat[rejected]
        base[m] = mu
    losses = {}
    R = config.gdf_perturbations
    for m in config.gdf_candidates:
        div = 0.0
        for r in range(R):
            rng = substream(config.seed, "gdf", m, r)
            delta = tau * rng.standard_normal(n)
            pert = flat + delta
            zp, _, cp = _standardize_flat(
                pert, slices, config.standardizer,
                scale_mask=mask if config.exclude_boundary else None,
            )
            sc = neighborhood_scores(zp, n1, n2, config.J, config.w)
            op = _eligible_order(sc, mask)
            _, rej_p = _run_fixed(pert, op, zp, labels, cp,
                                  min(m, op.size), m_total, config)
            mu_p = np.zeros_like(pert)
            mu_p[rej_p] = pert[rej_p]
            div += float(delta @ (mu_p - base[m]))
        gdf = div / (R * tau**2)
        resid = float(((flat - base[m]) ** 2).sum())
        losses[m] = resid + 2.0 * sigma**2 * gdf
    return min(losses, key=losses.get)
