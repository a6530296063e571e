"""Acceptance suite: one test per criterion, at the stated tolerances.

Heavy Monte Carlo cells are memoized at module scope so criteria that share
cells (Type-I, power orderings, missing-data robustness) reuse runs.  Each
test prints a PASS line with the measured numbers when it succeeds.
"""

import numpy as np
import pytest
from scipy import integrate, stats

from latsig._rng import substream
from latsig.combine import gamma_params, gamma_sf
from latsig.condsim import build_conditional, sample_fields
from latsig.efdr import bh_reject, smallest_adjusted_p
from latsig.grid import AggregatedData, drop_blocks, regular_blocks
from latsig.harness import run_power_study, run_roc_study, run_type1_study
from latsig.wavelet import dwt2, forward_flat, idwt2

SEED = 20260810
REPLICATES = 200  # criteria 2, 3, 5


def _report(criterion: str, detail: str) -> None:
    print(f"ACCEPTANCE {criterion}: PASS — {detail}")


# ---------------------------------------------------------------------------
# shared Monte Carlo cells

_POWER_CACHE: dict = {}


def power_cell(experiment, agg, r, h, phi, replicates=REPLICATES):
    key = (experiment, agg, r, h, phi, replicates)
    if key not in _POWER_CACHE:
        rows = run_power_study(
            experiment,
            r_list=(r,), h_list=(h,), phi_list=(phi,), agg_list=(agg,),
            replicates=replicates, seed=SEED, quiet=True,
        )
        _POWER_CACHE[key] = {row["method"]: row for row in rows}
    return _POWER_CACHE[key]


def _rate(cell, method):
    return cell[method]["rate"]


def _se(cell, method):
    row = cell[method]
    return max(row["mc_se"], np.sqrt(0.25 / row["replicates"]) * 0.1)


# ---------------------------------------------------------------------------
# criterion 1: Type-I table reproduction (subsampled z-test study)

PAPER_TYPE1 = {
    # (alpha, N): (NVE, CPL, MOM)
    (0.01, 80): (0.0016, 0.0078, 0.0063),
    (0.01, 85): (0.0030, 0.0089, 0.0073),
    (0.01, 90): (0.0049, 0.0098, 0.0087),
    (0.01, 95): (0.0065, 0.0098, 0.0090),
    (0.05, 80): (0.0161, 0.0454, 0.0446),
    (0.05, 85): (0.0233, 0.0488, 0.0481),
    (0.05, 90): (0.0305, 0.0482, 0.0478),
    (0.05, 95): (0.0389, 0.0485, 0.0482),
    (0.10, 80): (0.0443, 0.0958, 0.1033),
    (0.10, 85): (0.0574, 0.0968, 0.1044),
    (0.10, 90): (0.0686, 0.0949, 0.1001),
    (0.10, 95): (0.0828, 0.0971, 0.0997),
}


def test_criterion_1_type1_table():
    rows = run_type1_study(
        N_list=(80, 85, 90, 95), alpha_list=(0.01, 0.05, 0.10),
        M=100, replicates=5000, seed=SEED, quiet=True,
    )
    got = {(r["alpha"], r["N"], r["method"]): r["rate"] for r in rows}
    tol = 0.010
    worst = 0.0
    for (alpha, N), (nve, cpl, mom) in PAPER_TYPE1.items():
        d_cpl = abs(got[(alpha, N, "CPL")] - cpl)
        d_mom = abs(got[(alpha, N, "MOM")] - mom)
        worst = max(worst, d_cpl, d_mom)
        assert d_cpl <= tol, (alpha, N, "CPL", got[(alpha, N, "CPL")], cpl)
        assert d_mom <= tol, (alpha, N, "MOM", got[(alpha, N, "MOM")], mom)
    se = np.sqrt(0.05 * 0.95 / 5000)
    for N in (80, 85, 90, 95):
        rate = got[(0.05, N, "NVE")]
        assert rate < 0.05 - 2 * se, ("NVE not conservative", N, rate)
    _report(
        "1 (Type-I table)",
        f"CPL/MOM within ±{tol} of the reference at all 12 cells "
        f"(worst |Δ|={worst:.4f}); NVE conservative at every α=0.05 cell "
        f"(e.g. N=80 rate={got[(0.05, 80, 'NVE')]:.4f})",
    )


# ---------------------------------------------------------------------------
# criterion 2: Type-I control of the full pipeline

NULL_CELLS = [(agg, phi) for agg in (64, 16, 8) for phi in (0.0, 5.0, 10.0)]


def test_criterion_2_pipeline_type1():
    lines = []
    for agg, phi in NULL_CELLS:
        cell = power_cell(1, agg, 10, 0.0, phi)
        method = "IDL" if agg == 64 else "CPL"
        rate = _rate(cell, method)
        assert 0.01 <= rate <= 0.11, (agg, phi, method, rate)
        lines.append(f"{method}@{agg}x{agg},phi={phi:.0f}:{rate:.3f}")
    _report("2 (pipeline Type-I)", "; ".join(lines))


def test_criterion_2_smoke_50_replicates():
    # the fast CI version: one representative aggregated cell at 50 replicates
    rows = run_power_study(
        1, r_list=(10,), h_list=(0.0,), phi_list=(5.0,), agg_list=(16,),
        replicates=50, seed=SEED + 1, quiet=True,
    )
    rate = {r["method"]: r["rate"] for r in rows}["CPL"]
    assert rate <= 0.16  # 0.05 + ~3.5 Monte Carlo s.e. at R=50
    _report("2-smoke (50 replicates)", f"CPL@16x16,phi=5: {rate:.3f}")


# ---------------------------------------------------------------------------
# criterion 3: power orderings


def test_criterion_3_power_orderings():
    h_cells = {h: power_cell(1, 16, 10, h, 5.0) for h in (0.0, 2.0, 5.0)}
    p0, p2, p5 = (_rate(h_cells[h], "CPL") for h in (0.0, 2.0, 5.0))
    slack02 = 2 * np.hypot(_se(h_cells[0.0], "CPL"), _se(h_cells[2.0], "CPL"))
    slack25 = 2 * np.hypot(_se(h_cells[2.0], "CPL"), _se(h_cells[5.0], "CPL"))
    assert p2 >= p0 - slack02, (p0, p2)
    assert p5 >= p2 - slack25, (p2, p5)

    c_phi0 = power_cell(1, 16, 10, 3.0, 0.0)
    c_phi10 = power_cell(1, 16, 10, 3.0, 10.0)
    s = 2 * np.hypot(_se(c_phi0, "CPL"), _se(c_phi10, "CPL"))
    assert _rate(c_phi0, "CPL") >= _rate(c_phi10, "CPL") - s

    c_agg8 = power_cell(1, 8, 10, 5.0, 5.0)
    s2 = 2 * np.hypot(_se(h_cells[5.0], "CPL"), _se(c_agg8, "CPL"))
    assert p5 >= _rate(c_agg8, "CPL") - s2

    _report(
        "3 (power orderings)",
        f"h-curve 16x16 phi=5: {p0:.3f} -> {p2:.3f} -> {p5:.3f}; "
        f"phi=0 vs phi=10 at h=3: {_rate(c_phi0, 'CPL'):.3f} >= "
        f"{_rate(c_phi10, 'CPL'):.3f}; 16x16 vs 8x8 at h=5: {p5:.3f} >= "
        f"{_rate(c_agg8, 'CPL'):.3f}",
    )


# ---------------------------------------------------------------------------
# criterion 4: ROC orderings


def test_criterion_4_roc_orderings():
    rows16, _ = run_roc_study(
        rh_list=((1.0, 4), (3.0, 8), (5.0, 10)), phi=5.0, agg_list=(16,),
        replicates=(100, 100), seed=SEED, quiet=True,
    )
    rows8, _ = run_roc_study(
        rh_list=((5.0, 10),), phi=5.0, agg_list=(8,),
        replicates=(100, 100), seed=SEED, quiet=True,
    )
    auc16 = {(r["h"], r["r"]): r["auc"] for r in rows16 if r["method"] == "CPL"}
    auc8 = {(r["h"], r["r"]): r["auc"] for r in rows8 if r["method"] == "CPL"}
    a14, a38, a510 = auc16[(1.0, 4)], auc16[(3.0, 8)], auc16[(5.0, 10)]
    assert a14 <= a38 <= a510, (a14, a38, a510)
    assert a510 > a14
    assert a510 >= auc8[(5.0, 10)]
    _report(
        "4 (ROC orderings)",
        f"AUC by volume at 16x16: {a14:.3f} <= {a38:.3f} <= {a510:.3f}; "
        f"16x16 vs 8x8 at (5,10): {a510:.3f} >= {auc8[(5.0, 10)]:.3f}",
    )


# ---------------------------------------------------------------------------
# criterion 5: missing-data robustness


def test_criterion_5_missing_data_robustness():
    complete = _rate(power_cell(1, 16, 10, 5.0, 5.0), "CPL")
    corner = _rate(power_cell(2, 16, 10, 5.0, 5.0), "CPL")
    random_ = _rate(power_cell(3, 16, 10, 5.0, 5.0), "CPL")
    assert abs(corner - complete) <= 0.15, (corner, complete)
    assert abs(random_ - complete) <= 0.15, (random_, complete)
    _report(
        "5 (missing data)",
        f"power at (r=10,h=5,phi=5,16x16): complete={complete:.3f}, "
        f"corner mask={corner:.3f}, random mask={random_:.3f}",
    )


# ---------------------------------------------------------------------------
# criterion 6: oracle and property suites


def test_criterion_6_dwt_roundtrip_and_parseval():
    rng = substream(SEED, "acc-dwt")
    worst_rt, worst_pe = 0.0, 0.0
    for trial in range(25):
        n = int(rng.choice([16, 32, 64]))
        J = int(rng.integers(1, 4))
        x = rng.standard_normal((n, n))
        for filt in ("la8", "haar"):
            pyr = dwt2(x, J, filt)
            worst_pe = max(worst_pe, abs((pyr.flat() ** 2).sum() - (x**2).sum()))
            back = idwt2(pyr)
            worst_rt = max(worst_rt, float(np.max(np.abs(back.values - x))))
    assert worst_rt < 1e-9
    assert worst_pe < 1e-10
    _report("6a (DWT)", f"round-trip max err {worst_rt:.2e}, Parseval {worst_pe:.2e}")


def test_criterion_6_conditional_aggregation_consistency():
    rng = substream(SEED, "acc-cond")
    worst = 0.0
    for trial in range(1000):
        n1 = 2 * int(rng.integers(1, 4))
        n2 = 2 * int(rng.integers(1, 4))
        n = n1 * n2
        A = rng.standard_normal((n, n))
        sigma = A @ A.T / n + 0.25 * np.eye(n)
        scheme = regular_blocks(n1, n2, int(rng.choice([1, 2])),
                                int(rng.choice([1, 2])))
        if scheme.K > 2 and rng.random() < 0.5:
            scheme = drop_blocks(scheme, [int(rng.integers(scheme.K))])
        data = AggregatedData(scheme, rng.standard_normal(scheme.K))
        law = build_conditional(sigma, data)
        f = sample_fields(law, 1, seed=trial)[0].reshape(-1)
        err = float(np.max(np.abs(scheme.block_means(f) - data.values)))
        worst = max(worst, err)
    assert worst < 1e-7
    _report("6b (conditioning)", f"H·sample = data within {worst:.2e} on 1000 instances")


def test_criterion_6_bh_oracles():
    rng = substream(SEED, "acc-bh")
    eps = 1e-9
    for _ in range(1000):
        k = int(rng.integers(1, 9))
        p = rng.random(k)
        alpha = float(rng.uniform(0.01, 0.5))
        # exhaustive oracle over every cutoff
        srt = np.sort(p)
        best = 0
        for i in range(1, k + 1):
            if srt[i - 1] <= i * alpha / k:
                best = i
        expected = set(np.where(p <= (srt[best - 1] if best else -1))[0].tolist())
        assert set(bh_reject(p, alpha).tolist()) == expected
        a = smallest_adjusted_p(p)
        assert a == pytest.approx(min(srt[i - 1] * k / i for i in range(1, k + 1)))
        assert bh_reject(p, min(a + eps, 1.0)).size > 0
        if a > eps:
            assert bh_reject(p, a - eps).size == 0
    _report("6c (BH oracles)", "step-up and smallest-adjusted-p match brute force, 1000 lists")


def test_criterion_6_gamma_tail_quadrature():
    rng = substream(SEED, "acc-gamma")
    worst = 0.0
    for _ in range(150):
        a = float(rng.uniform(0.4, 30.0))
        b = float(rng.uniform(0.05, 3.0))
        T = float(rng.uniform(0.0, 2.5 * a / b))
        ref, _ = integrate.quad(
            lambda x: stats.gamma.pdf(x, a, scale=1.0 / b), 0.0, T, limit=200
        )
        worst = max(worst, abs(gamma_sf(T, a, b) - (1.0 - ref)))
    assert worst < 1e-8
    _report("6d (Gamma tail)", f"max |sf - quadrature| = {worst:.2e}")


def test_criterion_6_intraclass_eigenvalues():
    rng = substream(SEED, "acc-eig")
    worst = 0.0
    for M in range(2, 11):
        sigma2 = float(rng.uniform(0.5, 3.0))
        rho = float(rng.uniform(0.0, 0.99))
        U = sigma2 * ((1 - rho) * np.eye(M) + rho * np.ones((M, M)))
        ev = np.sort(np.linalg.eigvalsh(U))
        worst = max(worst, abs(ev[-1] - sigma2 * (1 + (M - 1) * rho)))
        worst = max(worst, float(np.max(np.abs(ev[:-1] - sigma2 * (1 - rho)))))
    assert worst < 1e-10
    _report("6e (intra-class eigenvalues)", f"max deviation {worst:.2e}")


def test_criterion_6_gamma_params_identities():
    for M in (1, 2, 10, 100):
        a, b = gamma_params(0.0, M)
        assert (a, b) == (M, 0.5)
        for rho in (0.0, 0.25, 0.9, 1 - 1e-9):
            a, b = gamma_params(rho, M)
            # identical scaling of both parameters: exact up to division rounding
            assert a / b == pytest.approx(2 * M, rel=1e-14, abs=0.0)
    _report("6f (Gamma identities)", "a/b = 2M at machine precision; rho=0 gives Fisher (M, 1/2)")


# ---------------------------------------------------------------------------
# criterion 7: determinism across worker counts


def test_criterion_7_jobs_determinism(tmp_path):
    from latsig.cli import main

    outputs = []
    for jobs in ("1", "8"):
        out = tmp_path / f"jobs{jobs}"
        code = main([
            "experiment", "1", "--r", "4", "--h", "0,2", "--phi", "0",
            "--agg", "8", "--replicates", "6", "--M", "10", "--jobs", jobs,
            "--seed", str(SEED), "--out", str(out), "--quiet",
        ])
        assert code == 0
        outputs.append((out / "power_exp1.csv").read_bytes())
    assert outputs[0] == outputs[1]

    t1 = []
    for jobs in ("1", "8"):
        out = tmp_path / f"t1jobs{jobs}"
        code = main([
            "type1", "--N", "85", "--alpha", "0.05", "--replicates", "12",
            "--M", "40", "--mc-samples", "5000", "--jobs", jobs,
            "--seed", str(SEED), "--out", str(out), "--quiet",
        ])
        assert code == 0
        t1.append((out / "type1.csv").read_bytes())
    assert t1[0] == t1[1]
    _report("7 (determinism)", "--jobs 1 and --jobs 8 study CSVs byte-identical")
