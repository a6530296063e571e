"""Synthetic-data generators and Monte Carlo studies.

The studies mirror a four-experiment factorial design on a 64x64 lattice:
complete data at three aggregation scales (experiment 1), a contiguous block
of missing data in the upper-right corner (experiment 2), blocks missing at
random away from the signal (experiment 3), and nonstationary noise obtained
by deforming the coordinates (experiment 4).  The signal is a centered r x r
square of height h; the noise is an exponential covariance field with range
phi (iid when phi = 0).

Every generated dataset is reproducible from (experiment, cell, replicate,
seed); workers draw from per-replicate substreams, so study CSVs are
byte-identical for any ``jobs`` setting.
"""

from __future__ import annotations

import json
import multiprocessing
import sys
from dataclasses import dataclass

import numpy as np
from scipy import special

from . import __version__
from ._rng import substream
from .combine import combine
from .covariance import _lattice_coords
from .efdr import EfdrConfig, efdr_test
from .grid import (
    AggregationScheme,
    Grid2D,
    aggregate,
    atomic_write_text,
    drop_blocks,
    regular_blocks,
)
from .pipeline import PipelineConfig, detect

__all__ = [
    "SignalSpec",
    "NoiseSpec",
    "gen_field",
    "scheme_for_aggregation",
    "corner_mask",
    "random_mask",
    "run_power_study",
    "run_roc_study",
    "run_type1_study",
    "write_rows_csv",
    "write_manifest",
    "POWER_COLUMNS",
    "ROC_COLUMNS",
    "TYPE1_COLUMNS",
]

MISSING_FRACTION = 9 / 64  # of the grid area, experiments 2 and 3


@dataclass(frozen=True)
class SignalSpec:
    """A centered square signal: h on the r x r block at the grid middle."""

    r: int = 0
    h: float = 0.0
    n1: int = 64
    n2: int = 64

    def __post_init__(self) -> None:
        if self.r < 0 or self.r > min(self.n1, self.n2):
            raise ValueError(f"square width r={self.r} does not fit the grid")
        if self.r % 2 != 0:
            raise ValueError("the square is centered between pixels; r must be even")

    def rows(self) -> range:
        return range(self.n1 // 2 - self.r // 2, self.n1 // 2 + self.r // 2)

    def cols(self) -> range:
        return range(self.n2 // 2 - self.r // 2, self.n2 // 2 + self.r // 2)

    def field(self) -> np.ndarray:
        mu = np.zeros((self.n1, self.n2))
        if self.r and self.h:
            mu[self.rows()[0]: self.rows()[-1] + 1,
               self.cols()[0]: self.cols()[-1] + 1] = self.h
        return mu

    def pixel_indices(self) -> np.ndarray:
        return np.array(
            [i * self.n2 + j for i in self.rows() for j in self.cols()],
            dtype=np.int64,
        )


@dataclass(frozen=True)
class NoiseSpec:
    """Exponential-covariance noise, optionally coordinate-deformed.

    kappa = 0 is the stationary field; kappa != 0 warps s -> |s|^kappa s
    (1-based coordinates, origin just outside the lower-left corner), which
    concentrates spatial dependence near one corner of the grid.
    """

    phi: float = 5.0
    kappa: float = 0.0
    tau2: float = 1.0

    def __post_init__(self) -> None:
        if self.phi < 0:
            raise ValueError("phi must be >= 0 (0 means iid noise)")
        if self.tau2 <= 0:
            raise ValueError("tau2 must be positive")


_ROOT_CACHE: dict[tuple, np.ndarray] = {}


def _noise_root(n1: int, n2: int, noise: NoiseSpec) -> np.ndarray:
    """Dense symmetric square root of the (possibly deformed) covariance."""
    key = (n1, n2, noise.phi, noise.kappa, noise.tau2)
    if key not in _ROOT_CACHE:
        if len(_ROOT_CACHE) >= 6:
            _ROOT_CACHE.pop(next(iter(_ROOT_CACHE)))
        coords = _lattice_coords(n1, n2, (1.0, 1.0)) + 1.0  # 1-based
        if noise.kappa != 0.0:
            norms = np.linalg.norm(coords, axis=1) ** noise.kappa
            coords = coords * norms[:, None]
        diff0 = coords[:, 0][:, None] - coords[:, 0][None, :]
        diff1 = coords[:, 1][:, None] - coords[:, 1][None, :]
        sigma = noise.tau2 * np.exp(-np.hypot(diff0, diff1) / noise.phi)
        try:
            evals, vecs = np.linalg.eigh(sigma)
        except np.linalg.LinAlgError:
            sigma[np.diag_indices_from(sigma)] += 1e-10 * noise.tau2
            evals, vecs = np.linalg.eigh(sigma)
        root = vecs * np.sqrt(np.maximum(evals, 0.0))
        _ROOT_CACHE[key] = root
    return _ROOT_CACHE[key]


def gen_field(signal: SignalSpec, noise: NoiseSpec, seed: int,
              *path) -> Grid2D:
    """Signal plus correlated Gaussian noise, seeded by (seed, *path)."""
    n1, n2 = signal.n1, signal.n2
    rng = substream(seed, "gen-field", *path)
    if noise.phi == 0.0:
        delta = np.sqrt(noise.tau2) * rng.standard_normal(n1 * n2)
    else:
        delta = _noise_root(n1, n2, noise) @ rng.standard_normal(n1 * n2)
    return Grid2D(n1, n2, signal.field() + delta.reshape(n1, n2))


# ---------------------------------------------------------------------------
# aggregation scales and missingness masks


def scheme_for_aggregation(agg: int, n1: int = 64, n2: int = 64) -> AggregationScheme:
    """The agg x agg regular aggregation of an n1 x n2 grid."""
    if n1 % agg or n2 % agg:
        raise ValueError(f"aggregation {agg} does not divide the {n1}x{n2} grid")
    return regular_blocks(n1, n2, n1 // agg, n2 // agg)


def corner_mask(scheme: AggregationScheme, fraction: float = MISSING_FRACTION) -> list[int]:
    """Block indices forming the upper-right corner square of ~`fraction` area."""
    side = int(round(np.sqrt(fraction * scheme.n1 * scheme.n2)))
    b1, b2 = scheme.block_shape
    removed = []
    for k, (c1, c2) in enumerate(scheme.corners):
        if c1 + b1 <= side and c2 >= scheme.n2 - side:
            removed.append(k)
    return removed


def random_mask(
    scheme: AggregationScheme,
    protected_pixels: np.ndarray,
    rng: np.random.Generator,
    fraction: float = MISSING_FRACTION,
) -> list[int]:
    """Random block indices of ~`fraction` area avoiding the protected pixels."""
    protected = set(int(p) for p in protected_pixels)
    candidates = [
        k for k, b in enumerate(scheme.blocks)
        if not protected.intersection(b.tolist())
    ]
    count = int(round(fraction * scheme.K))
    if count > len(candidates):
        raise ValueError("protected region leaves too few blocks to remove")
    chosen = rng.choice(len(candidates), size=count, replace=False)
    return sorted(candidates[i] for i in chosen)


# ---------------------------------------------------------------------------
# study tasks

POWER_COLUMNS = [
    "experiment", "agg", "r", "h", "phi", "kappa", "mask", "method",
    "replicates", "rejections", "rate", "mc_se", "alpha", "M",
]
ROC_COLUMNS = [
    "agg", "r", "h", "phi", "method", "auc", "n_null", "n_alt", "M",
]
TYPE1_COLUMNS = [
    "alpha", "N", "method", "rate", "mc_se", "replicates", "M",
]


def _cell_path(cell: dict) -> tuple:
    return (
        int(cell["experiment"]), int(cell["agg"]), int(cell["r"]),
        int(round(1000 * cell["h"])), int(round(1000 * cell["phi"])),
        int(round(1000 * cell["kappa"])), str(cell["mask"]),
    )


def _replicate_pvalues(task: dict) -> dict[str, float]:
    """p-value per method for one synthetic replicate of one cell."""
    cell, rep, seed = task["cell"], task["rep"], task["seed"]
    n1 = n2 = task.get("n", 64)
    M = task.get("M", 100)
    path = _cell_path(cell) + (rep,)
    signal = SignalSpec(r=cell["r"], h=cell["h"], n1=n1, n2=n2)
    noise = NoiseSpec(phi=cell["phi"], kappa=cell["kappa"])
    grid = gen_field(signal, noise, seed, *path)

    agg = cell["agg"]
    scheme = scheme_for_aggregation(agg, n1, n2)
    if cell["mask"] == "corner":
        scheme = drop_blocks(scheme, corner_mask(scheme))
    elif cell["mask"] == "random":
        rng = substream(seed, "mask", *path)
        scheme = drop_blocks(
            scheme, random_mask(scheme, signal.pixel_indices(), rng)
        )
    elif cell["mask"] != "none":
        raise ValueError(f"unknown mask kind {cell['mask']!r}")

    if agg == n1 and cell["mask"] == "none":
        # complete fine-resolution data: the direct single-image test
        res = efdr_test(grid, EfdrConfig(J=task["J"], filter=task["filter"],
                                         alpha=task["alpha"]))
        return {"IDL": res.p_value}

    data = aggregate(grid, scheme)
    config = PipelineConfig(
        M=M, J=task["J"], filter=task["filter"], cov_kind=task["cov_kind"],
        method="CPL", alpha=task["alpha"],
        seed=_detect_seed(seed, path), mc_samples=task["mc_samples"],
    )
    report = detect(data, config)
    out = {"CPL": report.p_final}
    for method in ("MOM", "NVE"):
        out[method] = combine(report.p_values, method, alpha=task["alpha"]).p_final
    return out


def _detect_seed(seed: int, path: tuple) -> int:
    # fold the replicate path into one integer seed for the pipeline
    import hashlib

    digest = hashlib.blake2b(
        repr((seed,) + path).encode(), digest_size=8
    ).digest()
    return int.from_bytes(digest, "big")


def _run_tasks(tasks: list[dict], jobs: int) -> list[dict[str, float]]:
    if jobs <= 1:
        return [_replicate_pvalues(t) for t in tasks]
    chunk = max(1, len(tasks) // (4 * jobs))
    with multiprocessing.Pool(jobs) as pool:
        return pool.map(_replicate_pvalues, tasks, chunksize=chunk)


def _progress(msg: str, quiet: bool) -> None:
    if not quiet:
        print(msg, file=sys.stderr, flush=True)


def _make_cells(experiment: int, r_list, h_list, phi_list, kappa_list,
                agg_list) -> list[dict]:
    mask = {1: "none", 2: "corner", 3: "random", 4: "none"}[experiment]
    cells = []
    for agg in agg_list:
        for r in r_list:
            for h in h_list:
                for phi in phi_list:
                    for kappa in kappa_list:
                        cells.append(dict(
                            experiment=experiment, agg=int(agg), r=int(r),
                            h=float(h), phi=float(phi), kappa=float(kappa),
                            mask=mask,
                        ))
    return cells


def run_power_study(
    experiment: int,
    r_list=(10,),
    h_list=(0.0, 1.0, 2.0, 3.0, 4.0, 5.0),
    phi_list=(5.0,),
    kappa_list=None,
    agg_list=(64, 16, 8),
    replicates: int = 400,
    seed: int = 0,
    alpha: float = 0.05,
    M: int = 100,
    J: int = 2,
    filter: str = "la8",
    cov_kind: str = "exponential",
    mc_samples: int = 100_000,
    jobs: int = 1,
    quiet: bool = False,
) -> list[dict]:
    """Empirical rejection rates at level alpha over a cell lattice.

    One row per (cell, method); the Monte Carlo standard error is
    sqrt(rate(1-rate)/replicates).
    """
    if experiment not in (1, 2, 3, 4):
        raise ValueError(f"experiment must be 1..4, got {experiment}")
    if kappa_list is None:
        kappa_list = (-0.75, -0.5, 0.0, 0.5, 2.0) if experiment == 4 else (0.0,)
    cells = _make_cells(experiment, r_list, h_list, phi_list, kappa_list, agg_list)
    base = dict(seed=seed, alpha=alpha, M=M, J=J, filter=filter,
                cov_kind=cov_kind, mc_samples=mc_samples)
    rows = []
    for ci, cell in enumerate(cells):
        _progress(
            f"experiment {experiment}: cell {ci + 1}/{len(cells)} {cell}", quiet
        )
        tasks = [dict(base, cell=cell, rep=rep) for rep in range(replicates)]
        results = _run_tasks(tasks, jobs)
        methods = sorted(results[0])
        for method in methods:
            rej = sum(res[method] < alpha for res in results)
            rate = rej / replicates
            rows.append(dict(
                experiment=experiment, agg=cell["agg"], r=cell["r"],
                h=cell["h"], phi=cell["phi"], kappa=cell["kappa"],
                mask=cell["mask"], method=method, replicates=replicates,
                rejections=int(rej), rate=rate,
                mc_se=float(np.sqrt(rate * (1 - rate) / replicates)),
                alpha=alpha, M=M,
            ))
    return rows


def run_roc_study(
    rh_list=((1.0, 4), (3.0, 8), (5.0, 10)),
    phi: float = 5.0,
    agg_list=(16,),
    replicates: tuple[int, int] = (100, 100),
    seed: int = 0,
    M: int = 100,
    J: int = 2,
    filter: str = "la8",
    cov_kind: str = "exponential",
    mc_samples: int = 100_000,
    jobs: int = 1,
    quiet: bool = False,
) -> tuple[list[dict], dict]:
    """Empirical ROC per cell: AUC rows plus the raw p-value curves.

    For each aggregation the null p-values are generated once and shared by
    every (h, r) alternative; the curve is traced by sweeping the level, and
    the AUC is the Mann-Whitney statistic of alternative versus null
    p-values (ties counted half).
    """
    n_null, n_alt = replicates
    base = dict(seed=seed, alpha=0.05, M=M, J=J, filter=filter,
                cov_kind=cov_kind, mc_samples=mc_samples)
    rows = []
    curves: dict[tuple, dict[str, np.ndarray]] = {}
    for agg in agg_list:
        null_cell = dict(experiment=1, agg=int(agg), r=0, h=0.0,
                         phi=float(phi), kappa=0.0, mask="none")
        _progress(f"roc: null cell agg={agg}", quiet)
        null_tasks = [dict(base, cell=null_cell, rep=rep) for rep in range(n_null)]
        null_res = _run_tasks(null_tasks, jobs)
        methods = sorted(null_res[0])
        null_p = {m: np.array([r[m] for r in null_res]) for m in methods}
        for h, r in rh_list:
            alt_cell = dict(experiment=1, agg=int(agg), r=int(r), h=float(h),
                            phi=float(phi), kappa=0.0, mask="none")
            _progress(f"roc: alt cell agg={agg} h={h} r={r}", quiet)
            alt_tasks = [dict(base, cell=alt_cell, rep=rep) for rep in range(n_alt)]
            alt_res = _run_tasks(alt_tasks, jobs)
            for m in methods:
                alt_p = np.array([res[m] for res in alt_res])
                auc = _mann_whitney_auc(alt_p, null_p[m])
                rows.append(dict(
                    agg=int(agg), r=int(r), h=float(h), phi=float(phi),
                    method=m, auc=auc, n_null=n_null, n_alt=n_alt, M=M,
                ))
                curves[(int(agg), int(r), float(h), m)] = {
                    "null": null_p[m], "alt": alt_p,
                }
    return rows, curves


def _mann_whitney_auc(alt_p: np.ndarray, null_p: np.ndarray) -> float:
    """P(alt p-value < null p-value) + half the ties."""
    less = (alt_p[:, None] < null_p[None, :]).mean()
    ties = (alt_p[:, None] == null_p[None, :]).mean()
    return float(less + 0.5 * ties)


ROC_CURVE_COLUMNS = ["agg", "r", "h", "method", "alpha", "fpr", "tpr"]


def roc_curve_rows(curves: dict) -> list[dict]:
    """Empirical (Type-I rate, power) points as the level sweeps (0, 1)."""
    rows = []
    for (agg, r, h, m), d in sorted(curves.items()):
        null_p, alt_p = d["null"], d["alt"]
        thresholds = np.unique(np.concatenate([null_p, alt_p, [1.0]]))
        for t in thresholds:
            rows.append(dict(
                agg=agg, r=r, h=h, method=m, alpha=float(t),
                fpr=float((null_p < t).mean()),
                tpr=float((alt_p < t).mean()),
            ))
    return rows


# ---------------------------------------------------------------------------
# subsampled z-test Type-I study


def _type1_replicate(task: dict) -> dict[str, float]:
    seed, N, rep, M, mc_samples = (
        task["seed"], task["N"], task["rep"], task["M"], task["mc_samples"]
    )
    pool_size = task.get("pool", 100)
    rng = substream(seed, "type1", N, rep)
    x = rng.standard_normal(pool_size)
    order = np.argsort(rng.random((M, pool_size)), axis=1)[:, :N]
    z = x[order].mean(axis=1)
    p = np.clip(2.0 * special.ndtr(-np.sqrt(N) * np.abs(z)), 1e-300, 1.0)
    out = {}
    for method in ("NVE", "CPL", "MOM"):
        out[method] = combine(
            p, method, seed=_detect_seed(seed, ("type1", N, rep)),
            mc_samples=mc_samples,
        ).p_final
    return out


def run_type1_study(
    N_list=(80, 85, 90, 95),
    alpha_list=(0.01, 0.05, 0.10),
    M: int = 100,
    replicates: int = 5000,
    seed: int = 0,
    mc_samples: int = 100_000,
    jobs: int = 1,
    quiet: bool = False,
) -> list[dict]:
    """Type-I error of combining dependent z-test p-values.

    Each replicate draws a pool of 100 standard Gaussians, takes M subsamples
    of size N without replacement, turns the subsample means into two-sided
    z-test p-values, and combines them; the table reports the rejection rate
    of each method at each level.
    """
    rows = []
    for N in N_list:
        if not 2 <= N <= 100:
            raise ValueError(f"subsample size N={N} must lie in [2, 100]")
        _progress(f"type1: N={N}", quiet)
        tasks = [
            dict(seed=seed, N=int(N), rep=rep, M=M, mc_samples=mc_samples)
            for rep in range(replicates)
        ]
        if jobs <= 1:
            results = [_type1_replicate(t) for t in tasks]
        else:
            chunk = max(1, len(tasks) // (4 * jobs))
            with multiprocessing.Pool(jobs) as pool:
                results = pool.map(_type1_replicate, tasks, chunksize=chunk)
        for method in ("NVE", "CPL", "MOM"):
            p_final = np.array([r[method] for r in results])
            for alpha in alpha_list:
                rate = float((p_final < alpha).mean())
                rows.append(dict(
                    alpha=float(alpha), N=int(N), method=method, rate=rate,
                    mc_se=float(np.sqrt(rate * (1 - rate) / replicates)),
                    replicates=replicates, M=M,
                ))
    return rows


# ---------------------------------------------------------------------------
# tidy output


def _format_value(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_rows_csv(rows: list[dict], columns: list[str], path) -> None:
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_format_value(row[c]) for c in columns))
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_manifest(path, **params) -> None:
    payload = dict(params)
    payload["package_version"] = __version__
    atomic_write_text(path, json.dumps(payload, indent=2, default=str))
