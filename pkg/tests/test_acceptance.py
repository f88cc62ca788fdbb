"""Acceptance gate: one test per release criterion, each printing a
PASS/FAIL line (run with ``pytest tests/test_acceptance.py -v -s``).

Heavy reconstructions are shared through module-scoped fixtures; every
tolerance is fixed here, not computed.
"""

import time

import numpy as np
import pytest
from scipy.linalg import eigh

from dexct.experiment import config_from_dict, imaged_truth, run_experiment
from dexct.geometry import Geometry, radon_adjoint, radon_forward
from dexct.ipm import (
    DualEnergyProgram,
    IpmConfig,
    apply_preconditioner,
    ipm_solve,
    pcg_solve,
    separation_report,
    solve_qp,
    spectrum_bound,
)
from dexct.ipm import _diagonals_from_terms
from dexct.jtv import JtvConfig, jtv_gradient, jtv_solve, jtv_value
from dexct.metrics import evaluate, material_misclassification
from dexct.model import (
    DualEnergySystem,
    ImagePair,
    PVC_IODINE,
    RegWeights,
    SinogramPair,
    simulate_measurement,
)
from dexct.phantoms import PhantomSpec, generate

from oracles import (
    certify_kkt,
    dense_preconditioner,
    dense_quadratic,
    dense_radon,
    dense_system,
    solve_nonneg_qp,
)

TABLE_WEIGHTS = RegWeights(500.0, 250.0)


def report_line(number: int, name: str, passed: bool, detail: str) -> None:
    print(f"[criterion {number:02d}] {'PASS' if passed else 'FAIL'} {name}: {detail}")


def protocol_measurement(n, seed=404, noise=0.01, rotation=45.0):
    geo = Geometry.parallel_beam(n, 65)
    system = DualEnergySystem(PVC_IODINE, geo, geo)
    phantom = generate(PhantomSpec("hy", n))
    m = simulate_measurement(phantom, system, noise, rotation, seed=seed)
    return geo, system, phantom, m


@pytest.fixture(scope="module")
def hy32():
    """Reference run shared by the spectrum, iteration-budget, and
    preconditioner-effectiveness criteria."""
    geo, system, phantom, m = protocol_measurement(32)
    problem = DualEnergyProgram.build(m, system, TABLE_WEIGHTS)
    t0 = time.perf_counter()
    g, rep = solve_qp(
        problem, IpmConfig(tol=1e-8, early_termination=True, keep_iterates=True)
    )
    elapsed = time.perf_counter() - t0
    return {
        "geo": geo,
        "system": system,
        "problem": problem,
        "solution": g,
        "report": rep,
        "seconds": elapsed,
    }


@pytest.fixture(scope="module")
def hy128():
    """Shared N=128 measurement for the timing and quality criteria."""
    geo, system, phantom, m = protocol_measurement(128)
    truth = imaged_truth(phantom, 45.0)
    return {"geo": geo, "system": system, "m": m, "truth": truth}


@pytest.fixture(scope="module")
def hy128_quality(hy128):
    """Reconstructions behind the method-comparison criteria."""
    geo, m = hy128["geo"], hy128["m"]
    ip_pair, ip_rep = ipm_solve(
        m, PVC_IODINE, RegWeights(150.0, 120.0), geo, geo,
        IpmConfig(tol=1e-8, early_termination=True),
    )
    jtv_pair, jtv_rep = jtv_solve(m, hy128["system"], JtvConfig(gamma=0.001, n_iters=400))
    return {
        "ip": (ip_pair, ip_rep),
        "jtv": (jtv_pair, jtv_rep),
        "truth": hy128["truth"],
    }


def test_c01_adjoint_identity():
    worst = 0.0
    rng = np.random.default_rng(1)
    geos = [Geometry.parallel_beam(n, 65) for n in (8, 16, 32)]
    for geo in geos:  # warm the kernels before timing
        radon_adjoint(radon_forward(np.ones(geo.image_shape), geo), geo)
    t0 = time.perf_counter()
    for geo in geos:
        for _ in range(100):
            x = rng.standard_normal(geo.image_shape)
            y = rng.standard_normal(geo.sinogram_shape)
            ax = radon_forward(x, geo)
            aty = radon_adjoint(y, geo)
            defect = abs(np.vdot(ax, y) - np.vdot(x, aty))
            denom = np.linalg.norm(ax) * np.linalg.norm(y)
            worst = max(worst, defect / denom)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 5.0
    report_line(1, "adjoint identity", ok, f"max defect {worst:.2e}, {elapsed:.2f}s")
    assert worst <= 1e-12
    assert elapsed < 5.0


def test_c02_dense_oracle_equivalence():
    t0 = time.perf_counter()
    geo = Geometry.parallel_beam(8, 9)
    system = DualEnergySystem(PVC_IODINE, geo, geo)
    w = RegWeights(500.0, 250.0)
    dense_a = dense_system(system)
    dense_q = dense_quadratic(system, w)
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(20):
        pair = ImagePair(rng.standard_normal((8, 8)), rng.standard_normal((8, 8)))
        v = pair.stacked()
        fwd = system.forward(pair).stacked()
        worst = max(worst, np.linalg.norm(fwd - dense_a @ v) / np.linalg.norm(dense_a @ v))
        y = rng.standard_normal(2 * geo.n_rays)
        m = SinogramPair(
            y[: geo.n_rays].reshape(geo.sinogram_shape),
            y[geo.n_rays :].reshape(geo.sinogram_shape),
            geo,
            geo,
        )
        adj = system.adjoint(m).stacked()
        worst = max(worst, np.linalg.norm(adj - dense_a.T @ y) / np.linalg.norm(dense_a.T @ y))
        qv = system.quadratic_apply(pair, w).stacked()
        worst = max(worst, np.linalg.norm(qv - dense_q @ v) / np.linalg.norm(dense_q @ v))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 10.0
    report_line(2, "dense-oracle equivalence", ok, f"max rel err {worst:.2e}, {elapsed:.2f}s")
    assert worst <= 1e-12
    assert elapsed < 10.0


def test_c03_convexity_coercivity():
    geo = Geometry.parallel_beam(16, 17)
    system = DualEnergySystem(PVC_IODINE, geo, geo)
    rng = np.random.default_rng(3)
    worst_margin = np.inf
    for alpha, beta in ((1.0, 0.8), (500.0, 250.0), (1.0, 1.0)):
        w = RegWeights(alpha, beta)
        for _ in range(1000):
            pair = ImagePair(rng.standard_normal((16, 16)), rng.standard_normal((16, 16)))
            g = pair.stacked()
            qgg = float(np.dot(system.quadratic_apply(pair, w).stacked(), g))
            bound = (alpha - beta) * float(np.dot(g, g))
            margin = qgg - bound + 1e-12 * max(1.0, abs(qgg))
            worst_margin = min(worst_margin, margin)
            assert margin >= 0.0
    report_line(3, "convexity/coercivity", True, f"min slack margin {worst_margin:.3e}")


def test_c04_spectrum_bounds(hy32):
    t0 = time.perf_counter()
    problem = hy32["problem"]
    system = hy32["system"]
    iterates = hy32["report"].iterates
    assert iterates, "reference run must store iterates"
    dense_q = dense_quadratic(system, TABLE_WEIGHTS)
    dense_a = dense_radon(hy32["geo"])
    sigma = float(np.linalg.svd(dense_a, compute_uv=False)[0])
    lo, hi = spectrum_bound(
        PVC_IODINE, TABLE_WEIGHTS, problem.rho_low, problem.rho_high, sigma, sigma
    )
    picks = [0, len(iterates) // 2, len(iterates) - 1]
    q11, q12, q22 = problem.precond_terms()
    seen = []
    for i in picks:
        g_it, s_it = iterates[i]
        mat = dense_q + np.diag(s_it / g_it)
        pre = dense_preconditioner(_diagonals_from_terms(g_it, s_it, q11, q12, q22))
        eigs = eigh(mat, pre, eigvals_only=True)
        seen.append((float(eigs.min()), float(eigs.max())))
        assert eigs.min() >= lo - 1e-9 * max(1.0, abs(lo))
        assert eigs.max() <= hi + 1e-9 * hi
    elapsed = time.perf_counter() - t0
    ok = elapsed < 120.0
    spread = ", ".join(f"[{a:.3f}, {b:.1f}]" for a, b in seen)
    report_line(
        4, "spectrum bounds", ok, f"bound [{lo:.4f}, {hi:.1f}] contains {spread}; {elapsed:.0f}s"
    )
    assert elapsed < 120.0


def test_c05_ipm_matches_active_set_oracle():
    geo = Geometry.parallel_beam(8, 13)
    system = DualEnergySystem(PVC_IODINE, geo, geo)
    gram = None
    rng = np.random.default_rng(5)
    worst = 0.0
    for trial in range(20):
        alpha = float(rng.uniform(0.5, 5.0))
        w = RegWeights(alpha, 0.8 * alpha)
        phantom = ImagePair(rng.random((8, 8)), rng.random((8, 8)))
        m = simulate_measurement(phantom, system, 0.05, 0.0, seed=500 + trial)
        # solve past the 1e-8 stopping point: the oracle comparison needs the
        # weakly-active coordinates (which sit near mu / dual value) driven
        # below the 1e-6 matching tolerance
        recon, rep = ipm_solve(m, PVC_IODINE, w, geo, geo, IpmConfig(tol=1e-10))
        assert rep.converged
        assert rep.final_dual_residual < 1e-8 and rep.final_mu < 1e-8
        if gram is None:
            a = dense_radon(geo)
            gram = a.T @ a
        f_sum = PVC_IODINE.f_low() + PVC_IODINE.f_high()
        coupling = np.array([[w.alpha, w.beta], [w.beta, w.alpha]])
        dense_q = np.kron(f_sum, gram) + np.kron(coupling, np.eye(64))
        b = DualEnergyProgram.build(m, system, w).linear
        oracle = solve_nonneg_qp(dense_q, b)
        certify_kkt(dense_q, b, oracle)
        rel = np.linalg.norm(recon.stacked() - oracle) / max(np.linalg.norm(oracle), 1e-12)
        worst = max(worst, rel)
        assert rel <= 1e-6
    report_line(5, "interior point vs active-set oracle", True, f"max rel err {worst:.2e}")


def test_c06_iteration_budget_and_scaling(hy32, hy128):
    rep32 = hy32["report"]
    ok32 = rep32.converged and rep32.n_iterations <= 38 and rep32.total_pcg_iters <= 2100

    t0 = time.perf_counter()
    geo = hy128["geo"]
    _, rep128 = ipm_solve(
        hy128["m"], PVC_IODINE, TABLE_WEIGHTS, geo, geo,
        IpmConfig(tol=1e-8, early_termination=True),
    )
    elapsed = time.perf_counter() - t0
    ok = ok32 and rep128.converged and elapsed <= 600.0
    report_line(
        6,
        "iteration budget and scale",
        ok,
        f"N=32: {rep32.n_iterations} iters (<=38), {rep32.total_pcg_iters} PCG (<=2100); "
        f"N=128: {rep128.n_iterations} iters in {elapsed:.0f}s (<=600s)",
    )
    assert rep32.converged
    assert rep32.n_iterations <= 38
    assert rep32.total_pcg_iters <= 2100
    assert rep128.converged
    assert elapsed <= 600.0


def test_c07_separation_trend_with_beta():
    geo = Geometry.parallel_beam(64, 65)
    system = DualEnergySystem(PVC_IODINE, geo, geo)
    phantom = generate(PhantomSpec("hy", 64))
    m = simulate_measurement(phantom, system, 0.01, 45.0, seed=404)
    betas = [50.0 * k for k in range(1, 10)]
    counts = []
    averages = []
    for beta in betas:
        pair, rep = ipm_solve(
            m, PVC_IODINE, RegWeights(500.0, beta), geo, geo,
            IpmConfig(tol=1e-8, early_termination=True),
        )
        assert rep.converged
        assert rep.n_iterations <= 48  # N=64 iteration budget at this scale
        sep = separation_report(pair, threshold=1e-6)
        counts.append(sep.n_small)
        averages.append(sep.avg_product)
    decreasing = all(b < a for a, b in zip(averages, averages[1:]))
    growing = all(b >= a for a, b in zip(counts, counts[1:]))
    ratio = counts[-1] / counts[0]
    ok = decreasing and ratio >= 2.0
    report_line(
        7,
        "separation trend over beta",
        ok,
        f"avg product {averages[0]:.3e} -> {averages[-1]:.3e} "
        f"({'strictly decreasing' if decreasing else 'NOT monotone'}); "
        f"near-zero count {counts[0]} -> {counts[-1]} "
        f"(monotone growth: {growing}; ratio {ratio:.2f}, required >= 2)",
    )
    assert decreasing, "average product must decrease strictly along the beta grid"
    # Known shortfall: the count of hard-zero products grows monotonically on
    # every analog target tested, but only by ~1.1-1.4x.  The 2x growth quoted
    # for the original bitmaps needs their (unavailable) amplitude/structure:
    # with unit-amplitude binary analogs most of the eventual active set is
    # already pinned at beta=50.  Kept as stated rather than loosened.
    assert ratio >= 2.0, (
        f"near-zero product count grew {ratio:.2f}x (monotone: {growing}); "
        "the 2x growth of the original bitmaps is not reproducible with "
        "unit-amplitude procedural analogs"
    )


def test_c08_method_comparison_on_letters_target(hy128_quality):
    from dexct.metrics import segment_by_fraction

    truth = hy128_quality["truth"]
    ip_pair, _ = hy128_quality["ip"]
    jtv_pair, _ = hy128_quality["jtv"]
    seg1, _ = segment_by_fraction(ip_pair.g1, int(np.count_nonzero(truth.g1)))
    ip_mis1 = material_misclassification(seg1, truth.g1)
    ip_report = evaluate(ip_pair, truth)
    jtv_report = evaluate(jtv_pair, truth)
    ok = (
        ip_report.misclassification_1 <= jtv_report.misclassification_1
        and ip_report.misclassification_1 <= 0.06
    )
    report_line(
        8,
        "material identification vs baseline",
        ok,
        f"material-1 misclassification: ip {ip_report.misclassification_1:.4f} "
        f"<= jtv {jtv_report.misclassification_1:.4f} and <= 0.06 "
        f"(pair rule: ip {ip_report.misclassification:.4f}, "
        f"jtv {jtv_report.misclassification:.4f})",
    )
    assert ip_report.misclassification_1 <= jtv_report.misclassification_1
    assert ip_report.misclassification_1 <= 0.06
    assert abs(ip_mis1 - ip_report.misclassification_1) < 1e-12


def test_c09_jtv_gradient_and_monotonicity(hy128_quality):
    # full smoothed objective (data misfit + gamma * smoothed TV) at N=8:
    # analytic gradient against central differences, compared in vector norm
    geo = Geometry.parallel_beam(8, 9)
    system = DualEnergySystem(PVC_IODINE, geo, geo)
    rng = np.random.default_rng(9)
    pair = ImagePair(rng.random((8, 8)), rng.random((8, 8)))
    m = simulate_measurement(
        ImagePair(rng.random((8, 8)), rng.random((8, 8))), system, 0.0, 0.0, seed=0
    )
    gamma, kappa = 0.001, 1e-6
    m_vec = m.stacked()

    def objective(p):
        res = system.forward(p).stacked() - m_vec
        return float(np.dot(res, res)) + gamma * jtv_value(p, kappa)

    res = system.forward(pair).stacked() - m_vec
    adj = system.adjoint(
        SinogramPair(
            res[: geo.n_rays].reshape(geo.sinogram_shape),
            res[geo.n_rays :].reshape(geo.sinogram_shape),
            geo,
            geo,
        )
    )
    tv = jtv_gradient(pair, kappa)
    analytic = np.concatenate(
        [
            (2.0 * adj.g1 + gamma * tv.g1).ravel(),
            (2.0 * adj.g2 + gamma * tv.g2).ravel(),
        ]
    )
    h = 1e-6
    fd = np.empty_like(analytic)
    base = pair.stacked()
    for k in range(base.size):
        up = base.copy()
        dn = base.copy()
        up[k] += h
        dn[k] -= h
        fd[k] = (
            objective(ImagePair.from_stacked(up, 8)) - objective(ImagePair.from_stacked(dn, 8))
        ) / (2 * h)
    rel = float(np.linalg.norm(analytic - fd) / np.linalg.norm(fd))

    _, jtv_rep = hy128_quality["jtv"]
    objs = [r.objective for r in jtv_rep.iterations]
    monotone = all(b <= a + 1e-9 * abs(a) for a, b in zip(objs, objs[1:]))
    ok = rel <= 1e-5 and monotone and len(objs) == 400
    report_line(
        9,
        "jtv gradient and monotonicity",
        ok,
        f"gradient rel err {rel:.2e}; {len(objs)} iterations, monotone={monotone}",
    )
    assert rel <= 1e-5
    assert len(objs) == 400
    assert monotone


def test_c10_preconditioner_effectiveness(hy32):
    problem = hy32["problem"]
    iterates = hy32["report"].iterates
    g_mid, s_mid = iterates[len(iterates) // 2]
    w = s_mid / g_mid
    q11, q12, q22 = problem.precond_terms()
    diagonals = _diagonals_from_terms(g_mid, s_mid, q11, q12, q22)

    def matvec(v):
        return problem.hessian_apply(v) + w * v

    rhs = problem.linear - problem.hessian_apply(g_mid)  # dual residual direction
    _, k_plain = pcg_solve(matvec, rhs, lambda v: v.copy(), 1e-6, 50000)
    _, k_pre = pcg_solve(
        matvec, rhs, lambda v: apply_preconditioner(diagonals, v), 1e-6, 50000
    )
    ok = k_pre <= k_plain / 2
    report_line(
        10,
        "preconditioner effectiveness",
        ok,
        f"{k_pre} preconditioned vs {k_plain} plain CG iterations (need <= half)",
    )
    assert k_pre <= k_plain / 2


def test_c11_pipeline_determinism(tmp_path):
    raw = {
        "seed": 77,
        "phantom": {"kind": "hy", "size": 32},
        "geometry": {"n_angles": 65},
        "noise_level": 0.01,
        "rotation_deg": 45.0,
        "methods": {
            "ip": {"alpha": 500.0, "beta": 250.0, "tol": 1e-8, "early_termination": True},
            "jtv": {"gamma": 0.001, "n_iters": 400},
        },
    }
    cfg = config_from_dict(raw)
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    assert run_experiment(cfg, out_a) == 0
    assert run_experiment(cfg, out_b) == 0
    compared = 0
    timing_stripped = 0
    for path in sorted(out_a.rglob("*")):
        if not path.is_file():
            continue
        other = out_b / path.relative_to(out_a)
        a = path.read_bytes()
        b = other.read_bytes()
        if path.name == "report.csv" and b"cumulative_time_ms" in a:
            # wall-clock column is the single documented non-deterministic field
            a = b"\n".join(line.rsplit(b",", 1)[0] for line in a.splitlines())
            b = b"\n".join(line.rsplit(b",", 1)[0] for line in b.splitlines())
            timing_stripped += 1
        assert a == b, f"artifact differs between runs: {path.relative_to(out_a)}"
        compared += 1
    ok = compared >= 20
    report_line(
        11,
        "pipeline determinism",
        ok,
        f"{compared} artifacts byte-identical ({timing_stripped} timing columns excluded)",
    )
    assert compared >= 20
