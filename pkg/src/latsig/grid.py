"""Fine-resolution lattice data and block-aggregation schemes.

A ``Grid2D`` holds an ``n1 x n2`` image of pixel values on a unit-spaced
rectangular lattice.  An ``AggregationScheme`` is a collection of blocks, each
a set of fine-pixel indices; applying it to a grid averages the pixels of each
block, which is the change-of-support operator taking a fine image to
irregular-lattice data.  Blocks may overlap and need not cover the grid, so
both coarsening and missingness (and combinations of the two) are expressible
with the same type.

Pixel indices are row-major throughout: pixel (i, j) of an ``n1 x n2`` grid
has flat index ``i * n2 + j``.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

__all__ = [
    "Grid2D",
    "AggregationScheme",
    "AggregatedData",
    "aggregate",
    "regular_blocks",
    "identity_scheme",
    "drop_blocks",
    "restrict_to_observed",
    "observed_data",
    "read_grid_csv",
    "write_grid_csv",
    "read_scheme_json",
    "write_scheme_json",
    "atomic_write_text",
]


def _as_readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Grid2D:
    """An n1 x n2 real-valued image on a unit lattice.

    ``values`` is stored as an (n1, n2) array; missing pixels, if any, are
    NaN.  Instances are immutable and safe to share across threads.
    """

    n1: int
    n2: int
    values: np.ndarray

    def __post_init__(self) -> None:
        if self.n1 < 2 or self.n2 < 2:
            raise ValueError(f"grid must be at least 2x2, got {self.n1}x{self.n2}")
        v = np.asarray(self.values, dtype=float)
        if v.size != self.n1 * self.n2:
            raise ValueError(
                f"values has {v.size} entries, expected {self.n1 * self.n2}"
            )
        object.__setattr__(self, "values", _as_readonly(v.reshape(self.n1, self.n2)))

    @classmethod
    def from_flat(cls, n1: int, n2: int, flat: np.ndarray) -> "Grid2D":
        return cls(n1, n2, np.asarray(flat, dtype=float).reshape(n1, n2))

    @property
    def flat(self) -> np.ndarray:
        """Row-major 1-D view of the pixel values."""
        return self.values.reshape(-1)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n1, self.n2)

    def observed_mask(self) -> np.ndarray:
        """Boolean flat mask of non-missing (non-NaN) pixels."""
        return np.isfinite(self.flat)


@dataclass(frozen=True, eq=False)
class AggregationScheme:
    """Blocks {B_k} of fine-pixel indices over an n1 x n2 grid.

    The implied aggregation operator has row k equal to the indicator of
    block k divided by its size.  Blocks may overlap, and their union may be
    a strict subset of the grid.

    ``block_shape`` and ``corners`` are optional metadata recording that each
    block is a full b1 x b2 tile with the given top-left pixel coordinates.
    They are set by :func:`regular_blocks`, preserved by :func:`drop_blocks`,
    and let covariance code use translation-invariance fast paths; they never
    change the meaning of ``blocks``.
    """

    n1: int
    n2: int
    blocks: tuple[np.ndarray, ...]
    block_shape: tuple[int, int] | None = None
    corners: np.ndarray | None = None

    # segment arrays for vectorized block means, built once
    _flat_idx: np.ndarray = field(repr=False, compare=False, default=None)
    _seg_sizes: np.ndarray = field(repr=False, compare=False, default=None)
    _offsets: np.ndarray = field(repr=False, compare=False, default=None)

    def __post_init__(self) -> None:
        if len(self.blocks) == 0:
            raise ValueError("scheme must contain at least one block")
        n = self.n1 * self.n2
        blocks = []
        for k, b in enumerate(self.blocks):
            idx = np.asarray(b, dtype=np.int64).reshape(-1)
            if idx.size == 0:
                raise ValueError(f"block {k} is empty")
            if idx.min() < 0 or idx.max() >= n:
                raise ValueError(f"block {k} has pixel indices outside [0, {n})")
            idx = _as_int_readonly(idx)
            blocks.append(idx)
        object.__setattr__(self, "blocks", tuple(blocks))
        if self.corners is not None:
            c = np.asarray(self.corners, dtype=np.int64).reshape(len(blocks), 2)
            c.flags.writeable = False
            object.__setattr__(self, "corners", c)
        sizes = np.array([b.size for b in blocks], dtype=np.int64)
        flat = np.concatenate(blocks)
        offsets = np.concatenate(([0], np.cumsum(sizes)))
        flat.flags.writeable = False
        sizes.flags.writeable = False
        offsets.flags.writeable = False
        object.__setattr__(self, "_flat_idx", flat)
        object.__setattr__(self, "_seg_sizes", sizes)
        object.__setattr__(self, "_offsets", offsets)

    @property
    def K(self) -> int:
        return len(self.blocks)

    @property
    def block_sizes(self) -> np.ndarray:
        return self._seg_sizes

    @property
    def is_regular(self) -> bool:
        """True when every block is a congruent axis-aligned tile."""
        return self.block_shape is not None and self.corners is not None

    def h_matrix(self) -> sparse.csr_matrix:
        """The K x n averaging operator as a sparse matrix."""
        n = self.n1 * self.n2
        rows = np.repeat(np.arange(self.K), self._seg_sizes)
        data = np.repeat(1.0 / self._seg_sizes, self._seg_sizes)
        return sparse.csr_matrix((data, (rows, self._flat_idx)), shape=(self.K, n))

    def block_means(self, flat_values: np.ndarray) -> np.ndarray:
        """Mean of ``flat_values`` over each block (vectorized H @ values)."""
        v = np.asarray(flat_values, dtype=float).reshape(-1)
        sums = np.add.reduceat(v[self._flat_idx], self._offsets[:-1])
        return sums / self._seg_sizes


def _as_int_readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.int64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class AggregatedData:
    """Block averages Z(B_k) for a given scheme."""

    scheme: AggregationScheme
    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float).reshape(-1)
        if v.size != self.scheme.K:
            raise ValueError(
                f"values has {v.size} entries, expected K={self.scheme.K}"
            )
        object.__setattr__(self, "values", _as_readonly(v))

    @property
    def K(self) -> int:
        return self.scheme.K


def aggregate(grid: Grid2D, scheme: AggregationScheme) -> AggregatedData:
    """Average grid pixels over each block of the scheme.

    Raises on shape mismatch.  NaN pixels are allowed as long as no block
    touches them.
    """
    if (grid.n1, grid.n2) != (scheme.n1, scheme.n2):
        raise ValueError(
            f"scheme is for a {scheme.n1}x{scheme.n2} grid, "
            f"data is {grid.n1}x{grid.n2}"
        )
    return AggregatedData(scheme, scheme.block_means(grid.flat))


def regular_blocks(n1: int, n2: int, b1: int, b2: int) -> AggregationScheme:
    """Non-overlapping b1 x b2 tiles in row-major tile order."""
    if b1 <= 0 or b2 <= 0 or n1 % b1 != 0 or n2 % b2 != 0:
        raise ValueError(
            f"block size {b1}x{b2} does not divide grid {n1}x{n2}"
        )
    t1, t2 = n1 // b1, n2 // b2
    within = (np.arange(b1)[:, None] * n2 + np.arange(b2)[None, :]).reshape(-1)
    blocks = []
    corners = []
    for i in range(t1):
        for j in range(t2):
            corner = i * b1 * n2 + j * b2
            blocks.append(corner + within)
            corners.append((i * b1, j * b2))
    return AggregationScheme(
        n1, n2, tuple(blocks), block_shape=(b1, b2), corners=np.array(corners)
    )


def identity_scheme(n1: int, n2: int) -> AggregationScheme:
    """One block per pixel; aggregation is the identity."""
    return regular_blocks(n1, n2, 1, 1)


def drop_blocks(scheme: AggregationScheme, removed) -> AggregationScheme:
    """New scheme with the given block indices deleted."""
    removed = set(int(r) for r in removed)
    bad = [r for r in removed if r < 0 or r >= scheme.K]
    if bad:
        raise ValueError(f"block indices {bad} outside [0, {scheme.K})")
    keep = [k for k in range(scheme.K) if k not in removed]
    if not keep:
        raise ValueError("cannot remove every block")
    corners = scheme.corners[keep] if scheme.corners is not None else None
    return AggregationScheme(
        scheme.n1,
        scheme.n2,
        tuple(scheme.blocks[k] for k in keep),
        block_shape=scheme.block_shape,
        corners=corners,
    )


def restrict_to_observed(
    scheme: AggregationScheme, observed_mask: np.ndarray
) -> AggregationScheme:
    """Intersect each block with the observed pixel set, dropping empties.

    Regular-tile metadata is kept only when every surviving block is intact
    (i.e. missingness aligned with whole blocks).
    """
    mask = np.asarray(observed_mask, dtype=bool).reshape(-1)
    if mask.size != scheme.n1 * scheme.n2:
        raise ValueError("observed mask does not match grid size")
    blocks = []
    kept_idx = []
    intact = True
    for k, b in enumerate(scheme.blocks):
        sub = b[mask[b]]
        if sub.size == 0:
            continue
        if sub.size != b.size:
            intact = False
        blocks.append(sub)
        kept_idx.append(k)
    if not blocks:
        raise ValueError("no block survives the observation mask")
    if intact and scheme.is_regular:
        corners = scheme.corners[kept_idx]
        return AggregationScheme(
            scheme.n1, scheme.n2, tuple(blocks),
            block_shape=scheme.block_shape, corners=corners,
        )
    return AggregationScheme(scheme.n1, scheme.n2, tuple(blocks))


def observed_data(grid: Grid2D) -> AggregatedData:
    """Treat the observed (non-NaN) pixels as single-pixel blocks.

    This is the natural reading of a grid with missing cells: the scheme is
    the observed-pixel sub-matrix of the identity.
    """
    mask = grid.observed_mask()
    if not mask.any():
        raise ValueError("grid has no observed pixels")
    scheme = restrict_to_observed(identity_scheme(grid.n1, grid.n2), mask)
    return AggregatedData(scheme, grid.flat[mask])


# ---------------------------------------------------------------------------
# File formats: grid CSV and scheme JSON


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    """Write text to ``path`` via a temp file and rename."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_grid_csv(grid: Grid2D, path: str | os.PathLike) -> None:
    """Grid CSV: header ``n1,n2`` then n1 rows of n2 values, NA for missing."""
    lines = [f"{grid.n1},{grid.n2}"]
    for row in grid.values:
        lines.append(",".join("NA" if not np.isfinite(x) else repr(float(x)) for x in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_grid_csv(path: str | os.PathLike) -> Grid2D:
    with open(path) as f:
        header = f.readline().strip()
        try:
            n1, n2 = (int(x) for x in header.split(","))
        except Exception as exc:
            raise ValueError(f"bad grid CSV header {header!r}: expected 'n1,n2'") from exc
        rows = []
        for lineno, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if len(cells) != n2:
                raise ValueError(
                    f"line {lineno}: expected {n2} cells, got {len(cells)}"
                )
            rows.append([np.nan if c.strip().upper() == "NA" else float(c) for c in cells])
    if len(rows) != n1:
        raise ValueError(f"expected {n1} data rows, got {len(rows)}")
    return Grid2D(n1, n2, np.array(rows))


def write_scheme_json(scheme: AggregationScheme, path: str | os.PathLike) -> None:
    payload = {
        "n1": scheme.n1,
        "n2": scheme.n2,
        "blocks": [b.tolist() for b in scheme.blocks],
    }
    atomic_write_text(path, json.dumps(payload))


def read_scheme_json(path: str | os.PathLike) -> AggregationScheme:
    with open(path) as f:
        payload = json.load(f)
    try:
        n1, n2 = int(payload["n1"]), int(payload["n2"])
        blocks = tuple(np.asarray(b, dtype=np.int64) for b in payload["blocks"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"bad scheme JSON in {path}: {exc}") from exc
    return AggregationScheme(n1, n2, blocks)
