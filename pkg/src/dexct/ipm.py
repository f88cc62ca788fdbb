"""Predictor-corrector interior point method for the non-negative QP.

Solves ``min -m^T A g + 0.5 g^T Q g  s.t.  g >= 0`` where Q combines the
dual-energy Gram blocks with the alpha/beta channel coupling.  Because the
problem has no equality constraints the Newton step condenses onto the
normal equations

    (Q + G^-1 S) dg = r1 + G^-1 r2,      ds = G^-1 (r2 - S dg),

solved matrix-free by preconditioned conjugate gradients.  The
preconditioner replaces each Gram block with ``rho * I`` where ``rho``
approximates the (nearly constant) diagonal of A^T A, giving a 2x2-block
matrix with diagonal blocks that is inverted via a diagonal Schur
complement.  Centrality is improved by multiple correctors that push the
complementarity products toward the symmetric neighbourhood
``gamma * mu <= g_j s_j <= mu / gamma``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .geometry import Geometry, estimate_rho
from .model import AttenuationCoeffs, DualEnergySystem, ImagePair, RegWeights, SinogramPair


class IndefiniteOperatorError(RuntimeError):
    """Raised when CG meets non-positive curvature: the operator passed to
    the normal-equations solve is not positive definite (configuration bug,
    e.g. alpha < beta)."""


@dataclass(frozen=True)
class IpmConfig:
    """Interior point tuning knobs; defaults follow the reference protocol."""

    tol: float = 1e-8
    max_iters: int = 100
    n_correctors: int = 3
    neighbourhood_gamma: float = 0.2
    pcg_tol: float = 1e-6
    corrector_pcg_tol: float = 1e-2
    pcg_max_iters: int = 2000
    step_fraction: float = 0.995
    sigma_power: float = 3.0
    sigma_min: float = 1e-8
    sigma_max: float = 0.99999
    corrector_gain: float = 0.01
    early_termination: bool = False
    keep_iterates: bool = False

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if not 0.0 < self.neighbourhood_gamma < 1.0:
            raise ValueError("neighbourhood_gamma must lie in (0, 1)")
        if not 0.0 < self.step_fraction < 1.0:
            raise ValueError("step_fraction must lie in (0, 1)")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class IpmState:
    """Primal/dual iterate; both vectors stay strictly positive."""

    g: np.ndarray
    s: np.ndarray
    mu: float
    iteration: int


@dataclass(frozen=True)
class PrecondDiagonals:
    """Diagonals of the 2x2-block preconditioner, one vector per block."""

    d11: np.ndarray
    d12: np.ndarray
    d22: np.ndarray
    rho_low: float
    rho_high: float

    def __post_init__(self):
        if np.any(self.d11 <= 0) or np.any(self.d22 <= 0):
            raise ValueError("diagonal blocks must be strictly positive")
        if np.any(self.d22 - self.d12**2 / self.d11 <= 0):
            raise ValueError("Schur-complement diagonal must be strictly positive")


@dataclass
class IterationRecord:
    iteration: int
    mu: float
    dual_residual: float
    pcg_iters: int
    cumulative_time_ms: float


@dataclass
class IpmReport:
    """Per-iteration convergence trace of one interior point solve."""

    iterations: list[IterationRecord] = field(default_factory=list)
    converged: bool = False
    final_mu: float = float("nan")
    final_dual_residual: float = float("nan")
    iterates: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    @property
    def n_iterations(self) -> int:
        return len(self.iterations)

    @property
    def total_pcg_iters(self) -> int:
        return sum(r.pcg_iters for r in self.iterations)

    @property
    def total_time_ms(self) -> float:
        return self.iterations[-1].cumulative_time_ms if self.iterations else 0.0

    def to_csv(self) -> str:
        lines = ["iteration,mu,dual_residual,pcg_iters,cumulative_time_ms"]
        for r in self.iterations:
            lines.append(
                f"{r.iteration},{r.mu!r},{r.dual_residual!r},{r.pcg_iters},"
                f"{r.cumulative_time_ms!r}"
            )
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class SeparationReport:
    n_small: int
    avg_product: float


def separation_report(pair: ImagePair, threshold: float = 1e-6) -> SeparationReport:
    """Count pixels whose material product is below ``threshold`` and report
    the average product ``<g1, g2> / N^2``."""
    prod = pair.g1 * pair.g2
    return SeparationReport(
        n_small=int(np.count_nonzero(prod < threshold)),
        avg_product=float(np.sum(prod)) / pair.g1.size,
    )


# ---------------------------------------------------------------------------
# problem abstraction: anything exposing a hessian matvec, the linear term
# A^T m, and the scalar coefficients of the static preconditioner blocks.


@dataclass(frozen=True)
class SeparableProgram:
    """Synthetic QP with Q = [[alpha I, beta I], [beta I, alpha I]] only.

    Used for solver verification: with beta = 0 the problem separates into
    scalar projections with the closed form ``g_j = max(b_j, 0) / alpha``.
    """

    linear: np.ndarray
    weights: RegWeights

    @property
    def n(self) -> int:
        return self.linear.size

    def hessian_apply(self, v: np.ndarray) -> np.ndarray:
        h = self.n // 2
        a, b = self.weights.alpha, self.weights.beta
        out = np.empty_like(v)
        out[:h] = a * v[:h] + b * v[h:]
        out[h:] = b * v[:h] + a * v[h:]
        return out

    def precond_terms(self) -> tuple[float, float, float]:
        return self.weights.alpha, self.weights.beta, self.weights.alpha


@dataclass(frozen=True)
class DualEnergyProgram:
    """The tomographic QP in stacked-vector form."""

    system: DualEnergySystem
    weights: RegWeights
    linear: np.ndarray
    rho_low: float
    rho_high: float

    @classmethod
    def build(
        cls,
        m: SinogramPair,
        system: DualEnergySystem,
        weights: RegWeights,
        rho_samples: int = 256,
        rho_seed: int = 0,
    ) -> "DualEnergyProgram":
        n2 = system.n_pixels**2
        rho_low = estimate_rho(system.geo_low, min(n2, rho_samples), seed=rho_seed)
        if system.shared_operator:
            rho_high = rho_low
        else:
            rho_high = estimate_rho(system.geo_high, min(n2, rho_samples), seed=rho_seed)
        atm = system.adjoint(m).stacked()
        return cls(system, weights, atm, rho_low, rho_high)

    @property
    def n(self) -> int:
        return 2 * self.system.n_pixels**2

    def hessian_apply(self, v: np.ndarray) -> np.ndarray:
        n = self.system.n_pixels
        pair = ImagePair(v[: n * n].reshape(n, n), v[n * n :].reshape(n, n))
        return self.system.quadratic_apply(pair, self.weights).stacked()

    def precond_terms(self) -> tuple[float, float, float]:
        c = self.system.coeffs
        a, b = self.weights.alpha, self.weights.beta
        q11 = c.c11**2 * self.rho_low + c.c21**2 * self.rho_high + a
        q12 = c.c11 * c.c12 * self.rho_low + c.c21 * c.c22 * self.rho_high + b
        q22 = c.c12**2 * self.rho_low + c.c22**2 * self.rho_high + a
        return q11, q12, q22


def kkt_residuals(state: IpmState, problem) -> tuple[float, float]:
    """Normalized dual residual ``||A^T m - Q g + s|| / ||A^T m||`` and the
    complementarity measure ``mu = g^T s / n``."""
    r1 = problem.linear - problem.hessian_apply(state.g) + state.s
    denom = float(np.linalg.norm(problem.linear))
    if denom == 0.0:
        denom = 1.0
    return float(np.linalg.norm(r1)) / denom, float(np.dot(state.g, state.s)) / state.g.size


def build_preconditioner(
    g: np.ndarray,
    s: np.ndarray,
    coeffs: AttenuationCoeffs,
    weights: RegWeights,
    rho_low: float,
    rho_high: float,
) -> PrecondDiagonals:
    """Block diagonals: static rho/alpha/beta terms plus the split ``s/g``."""
    if np.any(g <= 0) or np.any(s <= 0):
        raise ValueError("g and s must be strictly positive")
    q11 = coeffs.c11**2 * rho_low + coeffs.c21**2 * rho_high + weights.alpha
    q12 = coeffs.c11 * coeffs.c12 * rho_low + coeffs.c21 * coeffs.c22 * rho_high + weights.beta
    q22 = coeffs.c12**2 * rho_low + coeffs.c22**2 * rho_high + weights.alpha
    return _diagonals_from_terms(g, s, q11, q12, q22, rho_low, rho_high)


def _diagonals_from_terms(g, s, q11, q12, q22, rho_low=0.0, rho_high=0.0) -> PrecondDiagonals:
    h = g.size // 2
    w = s / g
    return PrecondDiagonals(
        d11=q11 + w[:h],
        d12=np.full(h, q12),
        d22=q22 + w[h:],
        rho_low=rho_low,
        rho_high=rho_high,
    )


def apply_preconditioner(diagonals: PrecondDiagonals, y: np.ndarray) -> np.ndarray:
    """Solve the 2x2-block diagonal system via its diagonal Schur complement."""
    d11, d12, d22 = diagonals.d11, diagonals.d12, diagonals.d22
    h = d11.size
    y1, y2 = y[:h], y[h:]
    t = y1 / d11
    x2 = (y2 - d12 * t) / (d22 - d12 * d12 / d11)
    x1 = (y1 - d12 * x2) / d11
    return np.concatenate([x1, x2])


def pcg_solve(
    matvec,
    rhs: np.ndarray,
    precond,
    tol: float,
    max_iters: int,
    abs_residual_target: float | None = None,
    on_iterate=None,
) -> tuple[np.ndarray, int]:
    """Preconditioned conjugate gradients from a zero initial guess.

    Stops when the preconditioned residual norm drops below ``tol`` times
    its initial value, when the plain residual 2-norm drops below
    ``abs_residual_target`` (if given), or at the iteration cap.  Raises
    :class:`IndefiniteOperatorError` on non-positive curvature.
    """
    x = np.zeros_like(rhs)
    r = rhs.copy()
    z = precond(r)
    rz = float(np.dot(r, z))
    if rz < 0:
        raise IndefiniteOperatorError("preconditioner is not positive definite")
    norm0 = np.sqrt(rz)
    if norm0 == 0.0:
        return x, 0
    p = z.copy()
    for k in range(1, max_iters + 1):
        q = matvec(p)
        pq = float(np.dot(p, q))
        if pq <= 0.0:
            raise IndefiniteOperatorError("non-positive curvature encountered in CG")
        a = rz / pq
        x += a * p
        r -= a * q
        if on_iterate is not None:
            on_iterate(x)
        z = precond(r)
        rz_new = max(float(np.dot(r, z)), 0.0)
        if np.sqrt(rz_new) <= tol * norm0:
            return x, k
        if abs_residual_target is not None and float(np.linalg.norm(r)) <= abs_residual_target:
            return x, k
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, max_iters


def _max_step(x: np.ndarray, dx: np.ndarray) -> float:
    """Largest step keeping ``x + a*dx`` non-negative (inf if unconstrained)."""
    neg = dx < 0
    if not np.any(neg):
        return np.inf
    return float(np.min(-x[neg] / dx[neg]))


def solve_qp(problem, config: IpmConfig = IpmConfig()) -> tuple[np.ndarray, IpmReport]:
    """Run the predictor-corrector interior point method on ``problem``.

    Returns the primal solution and a report with per-iteration centrality,
    dual residual, PCG counts, and timings.  Per iteration: an affine-scaling
    predictor fixes the centering parameter ``sigma = (mu_aff / mu)^3``, a
    combined step includes the second-order complementarity correction, and
    up to ``n_correctors`` centrality correctors (right-hand sides with the
    complementarity targets clamped into the symmetric neighbourhood) are
    accepted only while they enlarge the composite step sizes.
    """
    n = problem.n
    atm = problem.linear
    norm_atm = float(np.linalg.norm(atm))
    if norm_atm == 0.0:
        norm_atm = 1.0
    q11, q12, q22 = problem.precond_terms()

    init = np.sqrt(float(np.max(np.abs(atm))) + 1.0)
    g = np.full(n, init)
    s = np.full(n, init)
    mu = float(np.dot(g, s)) / n

    report = IpmReport()
    gamma = config.neighbourhood_gamma
    t_start = time.perf_counter()
    converged = False

    for it in range(1, config.max_iters + 1):
        qg = problem.hessian_apply(g)
        r1 = atm - qg + s
        dual = float(np.linalg.norm(r1)) / norm_atm
        if dual < config.tol and mu < config.tol:
            converged = True
            break
        if config.keep_iterates:
            report.iterates.append((g.copy(), s.copy()))

        w = s / g
        diagonals = _diagonals_from_terms(g, s, q11, q12, q22)

        def matvec(v):
            return problem.hessian_apply(v) + w * v

        def precond(v):
            return apply_preconditioner(diagonals, v)

        rel = config.pcg_tol
        if config.early_termination:
            # the CG residual equals the predicted post-step dual residual,
            # so once it falls safely below the outer tolerance further CG
            # progress cannot change the IPM outcome
            abs_target = 0.25 * config.tol * norm_atm
        else:
            abs_target = None

        pcg_count = 0

        # affine-scaling predictor (sigma = 0)
        dg_aff, k1 = pcg_solve(matvec, r1 - s, precond, rel, config.pcg_max_iters, abs_target)
        pcg_count += k1
        ds_aff = -s - w * dg_aff
        a_g_aff = min(1.0, _max_step(g, dg_aff))
        a_s_aff = min(1.0, _max_step(s, ds_aff))
        mu_aff = float(np.dot(g + a_g_aff * dg_aff, s + a_s_aff * ds_aff)) / n
        sigma = float(
            np.clip((max(mu_aff, 0.0) / mu) ** config.sigma_power, config.sigma_min, config.sigma_max)
        )

        # combined step with second-order complementarity correction
        r2 = sigma * mu - g * s - dg_aff * ds_aff
        dg, k2 = pcg_solve(matvec, r1 + r2 / g, precond, rel, config.pcg_max_iters, abs_target)
        pcg_count += k2
        ds = (r2 - s * dg) / g
        a_g = min(1.0, _max_step(g, dg))
        a_s = min(1.0, _max_step(s, ds))

        # multiple centrality correctors in the symmetric neighbourhood
        mu_t = sigma * mu
        for _ in range(config.n_correctors):
            if a_g + a_s >= 2.0 - config.corrector_gain:
                break
            a_g_t = min(1.0, 1.08 * a_g + 0.08)
            a_s_t = min(1.0, 1.08 * a_s + 0.08)
            v = (g + a_g_t * dg) * (s + a_s_t * ds)
            r2c = np.clip(v, gamma * mu_t, mu_t / gamma) - v
            if not np.any(r2c):
                break
            # correctors are accepted only on measured step improvement, so a
            # coarse solve is enough
            corr_rel = max(rel, config.corrector_pcg_tol)
            dgc, kc = pcg_solve(matvec, r2c / g, precond, corr_rel, config.pcg_max_iters)
            pcg_count += kc
            dsc = (r2c - s * dgc) / g
            dg_new = dg + dgc
            ds_new = ds + dsc
            a_g_new = min(1.0, _max_step(g, dg_new))
            a_s_new = min(1.0, _max_step(s, ds_new))
            if a_g_new + a_s_new >= a_g + a_s + config.corrector_gain:
                dg, ds, a_g, a_s = dg_new, ds_new, a_g_new, a_s_new
            else:
                break

        a_g_final = min(1.0, config.step_fraction * _max_step(g, dg))
        a_s_final = min(1.0, config.step_fraction * _max_step(s, ds))
        g = g + a_g_final * dg
        s = s + a_s_final * ds
        mu = float(np.dot(g, s)) / n

        report.iterations.append(
            IterationRecord(
                iteration=it,
                mu=mu,
                dual_residual=dual,
                pcg_iters=pcg_count,
                cumulative_time_ms=(time.perf_counter() - t_start) * 1e3,
            )
        )

    if converged:
        report.final_dual_residual = dual
    else:
        state = IpmState(g=g, s=s, mu=mu, iteration=report.n_iterations)
        report.final_dual_residual = kkt_residuals(state, problem)[0]
    report.final_mu = mu
    report.converged = converged
    return g, report


def ipm_solve(
    m: SinogramPair,
    coeffs: AttenuationCoeffs,
    weights: RegWeights,
    geo_low: Geometry,
    geo_high: Geometry,
    config: IpmConfig = IpmConfig(),
    rho_seed: int = 0,
) -> tuple[ImagePair, IpmReport]:
    """Reconstruct a material pair from dual-energy data.

    Returns the non-negative minimizer of the regularized quadratic program
    together with the solver report; non-convergence within the iteration
    budget is flagged on the report rather than raised.
    """
    system = DualEnergySystem(coeffs, geo_low, geo_high)
    problem = DualEnergyProgram.build(m, system, weights, rho_seed=rho_seed)
    g, report = solve_qp(problem, config)
    return ImagePair.from_stacked(g, system.n_pixels), report


def spectrum_bound(
    coeffs: AttenuationCoeffs,
    weights: RegWeights,
    rho_low: float,
    rho_high: float,
    sigma_low: float,
    sigma_high: float,
) -> tuple[float, float]:
    """Eigenvalue interval containing the preconditioned normal-equations
    spectrum, independent of the interior point iterate.

    For distinct low/high operators the bounds use the coupling matrices of
    each energy separately; when the two operators coincide the tighter
    single-operator interval based on the summed coupling matrix is
    returned.
    """
    a, b = weights.alpha, weights.beta
    f_low = coeffs.f_low()
    f_high = coeffs.f_high()

    def eig2(mat):
        tr = mat[0, 0] + mat[1, 1]
        det = mat[0, 0] * mat[1, 1] - mat[0, 1] * mat[1, 0]
        disc = np.sqrt(max(tr * tr / 4.0 - det, 0.0))
        return tr / 2.0 - disc, tr / 2.0 + disc

    if rho_low == rho_high and sigma_low == sigma_high:
        lam_f, cap_f = eig2(f_low + f_high)
        lower = (a - b) / (rho_low * cap_f + a + b)
        upper = (sigma_low**2 * cap_f + a + b) / (rho_low * lam_f + a - b)
        return lower, upper

    lam_rho, cap_rho = eig2(rho_low * f_low + rho_high * f_high)
    cap_fl = f_low[0, 0] + f_low[1, 1]  # rank-one coupling: top eigenvalue is the trace
    cap_fh = f_high[0, 0] + f_high[1, 1]
    lower = (a - b) / (cap_rho + a + b)
    upper = (sigma_low**2 * cap_fl + sigma_high**2 * cap_fh + a + b) / (lam_rho + a - b)
    return lower, upper
