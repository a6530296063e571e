"""Two-dimensional orthogonal discrete wavelet transform with periodic boundaries.

The transform is the standard separable pyramid: at each level the image is
split into a smooth part and three detail orientations (horizontal, vertical,
diagonal), and the smooth part is decomposed again.  Periodic extension keeps
the transform exactly orthonormal for any even subband length, which the
covariance projection relies on.

Coefficients are grouped into 3J+1 classes: class ``3(|j|-1)+m`` holds the
orientation-m details at scale j (j = -1 is finest), and class ``3J+1`` holds
the smooth coefficients.  ``forward_flat``/``inverse_flat`` expose the
transform as an orthogonal matrix acting on row-major pixel vectors, applied
to whole batches at once; the matrix itself is never materialized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "FILTERS",
    "WaveletPyramid",
    "dwt2",
    "idwt2",
    "class_of",
    "class_slices",
    "class_labels",
    "forward_flat",
    "inverse_flat",
]

# Orthonormal scaling (lowpass) filters.  Each satisfies sum h = sqrt(2),
# sum h^2 = 1 and vanishing even-lag autocorrelation; the tests check these
# identities rather than trusting the constants.
FILTERS: dict[str, np.ndarray] = {
    "haar": np.array([0.7071067811865476, 0.7071067811865476]),
    # Daubechies least-asymmetric, length 8 (spectral factorization carried out
    # in extended precision so the orthonormality identities hold to ~1e-16)
    "la8": np.array([
        -0.07576571478950221,
        -0.029635527646002493,
        0.497618667632775,
        0.8037387518051321,
        0.29785779560530606,
        -0.09921954357663353,
        -0.012603967262031304,
        0.032223100604051466,
    ]),
}


def _filters(name: str) -> tuple[np.ndarray, np.ndarray]:
    try:
        h = FILTERS[name]
    except KeyError:
        raise ValueError(f"unknown wavelet filter {name!r}; choose from {sorted(FILTERS)}")
    # quadrature mirror highpass
    g = ((-1.0) ** np.arange(h.size)) * h[::-1]
    return h, g


def _analyze_last(x: np.ndarray, h: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One periodic analysis step along the last axis (length must be even)."""
    n = x.shape[-1]
    L = h.size
    idx = (2 * np.arange(n // 2)[:, None] + np.arange(L)[None, :]) % n
    xg = x[..., idx]
    return xg @ h, xg @ g


def _synthesize_last(lo: np.ndarray, hi: np.ndarray, h: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Inverse of :func:`_analyze_last`."""
    half = lo.shape[-1]
    n = 2 * half
    cosets = [np.zeros(lo.shape, dtype=float), np.zeros(lo.shape, dtype=float)]
    for t in range(h.size):
        c = t % 2
        shift = (t - c) // 2
        contrib = h[t] * lo + g[t] * hi
        cosets[c] += np.roll(contrib, shift % half, axis=-1)
    out = np.empty(lo.shape[:-1] + (n,), dtype=float)
    out[..., 0::2] = cosets[0]
    out[..., 1::2] = cosets[1]
    return out


def _analyze_axis(x, h, g, axis):
    x = np.swapaxes(x, axis, -1)
    lo, hi = _analyze_last(x, h, g)
    return np.swapaxes(lo, axis, -1), np.swapaxes(hi, axis, -1)


def _synthesize_axis(lo, hi, h, g, axis):
    lo = np.swapaxes(lo, axis, -1)
    hi = np.swapaxes(hi, axis, -1)
    return np.swapaxes(_synthesize_last(lo, hi, h, g), axis, -1)


def _level_forward(x, h, g):
    """(LL, (d1, d2, d3)) for one level; x has shape (..., r, c)."""
    lo_c, hi_c = _analyze_axis(x, h, g, -1)
    ll, d2 = _analyze_axis(lo_c, h, g, -2)
    d1, d3 = _analyze_axis(hi_c, h, g, -2)
    return ll, (d1, d2, d3)


def _level_inverse(ll, details, h, g):
    d1, d2, d3 = details
    lo_c = _synthesize_axis(ll, d2, h, g, -2)
    hi_c = _synthesize_axis(d1, d3, h, g, -2)
    return _synthesize_axis(lo_c, hi_c, h, g, -1)


def _check_shape(n1: int, n2: int, J: int) -> None:
    if J < 1:
        raise ValueError(f"decomposition depth must be >= 1, got {J}")
    if J > int(np.log2(min(n1, n2))):
        raise ValueError(f"J={J} too deep for a {n1}x{n2} grid")
    if n1 % (1 << J) or n2 % (1 << J):
        raise ValueError(f"grid {n1}x{n2} not divisible by 2^{J}")


@dataclass(frozen=True, eq=False)
class WaveletPyramid:
    """Coefficients (d_{-1}, ..., d_{-J}, c_{-J}) of a 2-D image.

    ``details[s-1]`` holds the three orientation subbands at scale -s, each of
    shape (n1/2^s, n2/2^s); ``smooth`` is the scaling subband at depth J.
    """

    n1: int
    n2: int
    J: int
    filter: str
    details: tuple[tuple[np.ndarray, np.ndarray, np.ndarray], ...]
    smooth: np.ndarray

    def flat(self) -> np.ndarray:
        """Coefficients in canonical class-major order (length n1*n2)."""
        parts = []
        for bands in self.details:
            parts.extend(b.reshape(-1) for b in bands)
        parts.append(self.smooth.reshape(-1))
        return np.concatenate(parts)

    def class_array(self, k: int) -> np.ndarray:
        """Subband for class k (1-based), as a 2-D array."""
        if k == 3 * self.J + 1:
            return self.smooth
        s, m = divmod(k - 1, 3)
        return self.details[s][m]

    def with_flat(self, flat: np.ndarray) -> "WaveletPyramid":
        """Same structure with coefficients replaced from a flat vector."""
        return pyramid_from_flat(flat, self.n1, self.n2, self.J, self.filter)


def dwt2(grid, J: int, filter: str = "la8") -> WaveletPyramid:
    """Forward 2-D orthonormal periodic DWT.

    ``grid`` may be a :class:`~latsig.grid.Grid2D` or an (n1, n2) array.
    """
    x = np.asarray(getattr(grid, "values", grid), dtype=float)
    n1, n2 = x.shape
    _check_shape(n1, n2, J)
    h, g = _filters(filter)
    details = []
    ll = x
    for _ in range(J):
        ll, bands = _level_forward(ll, h, g)
        details.append(bands)
    return WaveletPyramid(n1, n2, J, filter, tuple(details), ll)


def idwt2(pyramid: WaveletPyramid):
    """Inverse DWT; exact up to floating-point error."""
    from .grid import Grid2D

    h, g = _filters(pyramid.filter)
    ll = pyramid.smooth
    for bands in reversed(pyramid.details):
        expected = tuple(2 * s for s in ll.shape)
        if bands[0].shape != ll.shape or len(bands) != 3:
            raise ValueError("malformed pyramid: subband shapes are inconsistent")
        ll = _level_inverse(ll, bands, h, g)
        if ll.shape != expected:
            raise ValueError("malformed pyramid: subband shapes are inconsistent")
    if ll.shape != (pyramid.n1, pyramid.n2):
        raise ValueError("malformed pyramid: shape does not match (n1, n2)")
    return Grid2D(pyramid.n1, pyramid.n2, ll)


def class_of(j: int | None = None, m: int | None = None, *, J: int | None = None,
             smooth: bool = False) -> int:
    """Class index in 1..3J+1 for scale/orientation (j, m), or the smooth class.

    Details: k = 3(|j|-1) + m for j in {-1, ..., -J}, m in {1, 2, 3}.
    Smooth (pass ``smooth=True`` with ``J``): k = 3J+1.
    """
    if smooth:
        if J is None or J < 1:
            raise ValueError("smooth class index requires the decomposition depth J")
        return 3 * J + 1
    if j is None or m is None:
        raise ValueError("detail class index requires scale j and orientation m")
    if j >= 0:
        raise ValueError(f"detail scales are negative integers, got j={j}")
    if m not in (1, 2, 3):
        raise ValueError(f"orientation must be 1, 2 or 3, got {m}")
    if J is not None and -j > J:
        raise ValueError(f"scale j={j} deeper than J={J}")
    return 3 * (-j - 1) + m


def class_slices(n1: int, n2: int, J: int) -> list[slice]:
    """Slices of the canonical flat layout for classes 1..3J+1 (0-indexed list)."""
    _check_shape(n1, n2, J)
    slices = []
    start = 0
    for s in range(1, J + 1):
        size = (n1 >> s) * (n2 >> s)
        for _ in range(3):
            slices.append(slice(start, start + size))
            start += size
    size = (n1 >> J) * (n2 >> J)
    slices.append(slice(start, start + size))
    start += size
    assert start == n1 * n2
    return slices


def class_labels(n1: int, n2: int, J: int) -> np.ndarray:
    """Class index (1-based) of every coefficient in the canonical flat layout."""
    labels = np.empty(n1 * n2, dtype=np.int64)
    for k, sl in enumerate(class_slices(n1, n2, J), start=1):
        labels[sl] = k
    return labels


def pyramid_from_flat(flat: np.ndarray, n1: int, n2: int, J: int,
                      filter: str = "la8") -> WaveletPyramid:
    """Rebuild a pyramid from canonical flat coefficients."""
    flat = np.asarray(flat, dtype=float).reshape(-1)
    if flat.size != n1 * n2:
        raise ValueError(f"expected {n1 * n2} coefficients, got {flat.size}")
    slices = class_slices(n1, n2, J)
    details = []
    for s in range(1, J + 1):
        shape = (n1 >> s, n2 >> s)
        bands = tuple(
            flat[slices[3 * (s - 1) + m]].reshape(shape) for m in range(3)
        )
        details.append(bands)
    smooth = flat[slices[-1]].reshape(n1 >> J, n2 >> J)
    return WaveletPyramid(n1, n2, J, filter, tuple(details), smooth)


def forward_flat(x: np.ndarray, J: int, filter: str = "la8") -> np.ndarray:
    """Apply the DWT matrix to images; batched over leading axes.

    ``x`` has shape (..., n1, n2); the result has shape (..., n1*n2) in the
    canonical class-major layout.
    """
    x = np.asarray(x, dtype=float)
    n1, n2 = x.shape[-2:]
    _check_shape(n1, n2, J)
    h, g = _filters(filter)
    lead = x.shape[:-2]
    parts = []
    ll = x
    for _ in range(J):
        ll, bands = _level_forward(ll, h, g)
        parts.extend(b.reshape(lead + (-1,)) for b in bands)
    parts.append(ll.reshape(lead + (-1,)))
    return np.concatenate(parts, axis=-1)


def inverse_flat(coeffs: np.ndarray, n1: int, n2: int, J: int,
                 filter: str = "la8") -> np.ndarray:
    """Apply the inverse DWT matrix to flat coefficient vectors; batched."""
    coeffs = np.asarray(coeffs, dtype=float)
    _check_shape(n1, n2, J)
    h, g = _filters(filter)
    lead = coeffs.shape[:-1]
    if coeffs.shape[-1] != n1 * n2:
        raise ValueError(f"expected {n1 * n2} coefficients, got {coeffs.shape[-1]}")
    slices = class_slices(n1, n2, J)
    ll = coeffs[..., slices[-1]].reshape(lead + (n1 >> J, n2 >> J))
    for s in range(J, 0, -1):
        shape = lead + (n1 >> s, n2 >> s)
        bands = tuple(
            coeffs[..., slices[3 * (s - 1) + m]].reshape(shape) for m in range(3)
        )
        ll = _level_inverse(ll, bands, h, g)
    return ll
