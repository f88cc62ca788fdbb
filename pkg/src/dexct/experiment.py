"""Declarative experiment pipeline: phantom -> simulate -> reconstruct ->
segment -> metrics -> artifacts.

A single YAML config describes one run; the master seed deterministically
derives all sub-seeds (phantom, noise, diagonal sampling), so identical
configs produce bit-identical numeric artifacts.  Wall-clock timing columns
are the only non-deterministic output.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .geometry import Geometry
from .io import array_to_csv, write_array, write_csv, write_pgm, write_sinogram_pair
from .ipm import IpmConfig, ipm_solve
from .jtv import JtvConfig, jtv_solve
from .metrics import evaluate, select_regularization
from .model import (
    AttenuationCoeffs,
    DualEnergySystem,
    ImagePair,
    PVC_IODINE,
    RegWeights,
    SinogramPair,
    rotate_pair,
    simulate_measurement,
)
from .phantoms import KINDS, PhantomSpec, generate

WORKERS_ENV = "DEXCT_WORKERS"


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the config path."""


@dataclass(frozen=True)
class PhantomSection:
    kind: str = "hy"
    size: int = 128
    seed: int | None = None
    material1_path: str | None = None
    material2_path: str | None = None


@dataclass(frozen=True)
class GeometrySection:
    n_angles: int = 65
    protocol: str = "same-operator"
    n_detectors: int | None = None
    detector_spacing: float = 1.0


@dataclass(frozen=True)
class IpSection:
    alpha: float = 150.0
    beta: float | None = 120.0
    beta_ratio: float = 0.8
    alpha_grid: tuple[float, ...] | None = None
    tol: float = 1e-8
    max_iters: int = 100
    n_correctors: int = 3
    neighbourhood_gamma: float = 0.2
    pcg_tol: float = 1e-6
    pcg_max_iters: int = 2000
    step_fraction: float = 0.995
    early_termination: bool = False

    def config(self) -> IpmConfig:
        return IpmConfig(
            tol=self.tol,
            max_iters=self.max_iters,
            n_correctors=self.n_correctors,
            neighbourhood_gamma=self.neighbourhood_gamma,
            pcg_tol=self.pcg_tol,
            pcg_max_iters=self.pcg_max_iters,
            step_fraction=self.step_fraction,
            early_termination=self.early_termination,
        )


@dataclass(frozen=True)
class JtvSection:
    gamma: float = 0.001
    gamma_grid: tuple[float, ...] | None = None
    kappa: float = 1e-6
    n_iters: int = 400

    def config(self, gamma: float | None = None) -> JtvConfig:
        return JtvConfig(
            gamma=self.gamma if gamma is None else gamma,
            kappa=self.kappa,
            n_iters=self.n_iters,
        )


@dataclass(frozen=True)
class BenchSection:
    sizes: tuple[int, ...] = (32,)
    alpha: float = 500.0
    beta: float = 250.0
    early_termination: bool = True
    tol: float = 1e-8
    max_iters: int = 100


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    phantom: PhantomSection = field(default_factory=PhantomSection)
    geometry: GeometrySection = field(default_factory=GeometrySection)
    coefficients: AttenuationCoeffs = PVC_IODINE
    noise_level: float = 0.01
    rotation_deg: float = 45.0
    ip: IpSection | None = field(default_factory=IpSection)
    jtv: JtvSection | None = field(default_factory=JtvSection)
    bench: BenchSection = field(default_factory=BenchSection)

    def to_dict(self) -> dict:
        cfg = {
            "seed": self.seed,
            "phantom": {
                "kind": self.phantom.kind,
                "size": self.phantom.size,
                "seed": self.phantom.seed,
                "material1_path": self.phantom.material1_path,
                "material2_path": self.phantom.material2_path,
            },
            "geometry": {
                "n_angles": self.geometry.n_angles,
                "protocol": self.geometry.protocol,
                "n_detectors": self.geometry.n_detectors,
                "detector_spacing": self.geometry.detector_spacing,
            },
            "coefficients": {
                "c11": self.coefficients.c11,
                "c12": self.coefficients.c12,
                "c21": self.coefficients.c21,
                "c22": self.coefficients.c22,
            },
            "noise_level": self.noise_level,
            "rotation_deg": self.rotation_deg,
            "methods": {},
            "bench": {
                "sizes": list(self.bench.sizes),
                "alpha": self.bench.alpha,
                "beta": self.bench.beta,
                "early_termination": self.bench.early_termination,
                "tol": self.bench.tol,
                "max_iters": self.bench.max_iters,
            },
        }
        if self.ip is not None:
            cfg["methods"]["ip"] = {
                "alpha": self.ip.alpha,
                "beta": self.ip.beta,
                "beta_ratio": self.ip.beta_ratio,
                "alpha_grid": list(self.ip.alpha_grid) if self.ip.alpha_grid else None,
                "tol": self.ip.tol,
                "max_iters": self.ip.max_iters,
                "n_correctors": self.ip.n_correctors,
                "neighbourhood_gamma": self.ip.neighbourhood_gamma,
                "pcg_tol": self.ip.pcg_tol,
                "pcg_max_iters": self.ip.pcg_max_iters,
                "step_fraction": self.ip.step_fraction,
                "early_termination": self.ip.early_termination,
            }
        if self.jtv is not None:
            cfg["methods"]["jtv"] = {
                "gamma": self.jtv.gamma,
                "gamma_grid": list(self.jtv.gamma_grid) if self.jtv.gamma_grid else None,
                "kappa": self.jtv.kappa,
                "n_iters": self.jtv.n_iters,
            }
        return cfg


def _expect(mapping, path):
    if not isinstance(mapping, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(mapping).__name__}")
    return mapping


def _get(mapping, key, path, types, default):
    value = mapping.get(key, default)
    if value is None:
        return None
    if not isinstance(value, types) or isinstance(value, bool) and bool not in _astuple(types):
        raise ConfigError(f"{path}.{key}: expected {types}, got {value!r}")
    return value


def _astuple(types):
    return types if isinstance(types, tuple) else (types,)


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build and validate an :class:`ExperimentConfig`; errors name the
    offending key path."""
    raw = _expect(raw, "config")
    unknown = set(raw) - {
        "seed", "phantom", "geometry", "coefficients", "noise_level", "rotation_deg",
        "methods", "bench",
    }
    if unknown:
        raise ConfigError(f"config: unknown keys {sorted(unknown)}")

    seed = _get(raw, "seed", "config", int, 0)

    ph = _expect(raw.get("phantom", {}), "phantom")
    phantom = PhantomSection(
        kind=_get(ph, "kind", "phantom", str, "hy"),
        size=_get(ph, "size", "phantom", int, 128),
        seed=_get(ph, "seed", "phantom", int, None),
        material1_path=_get(ph, "material1_path", "phantom", str, None),
        material2_path=_get(ph, "material2_path", "phantom", str, None),
    )
    if phantom.kind not in KINDS:
        raise ConfigError(f"phantom.kind: {phantom.kind!r} not one of {KINDS}")

    ge = _expect(raw.get("geometry", {}), "geometry")
    geometry = GeometrySection(
        n_angles=_get(ge, "n_angles", "geometry", int, 65),
        protocol=_get(ge, "protocol", "geometry", str, "same-operator"),
        n_detectors=_get(ge, "n_detectors", "geometry", int, None),
        detector_spacing=float(_get(ge, "detector_spacing", "geometry", (int, float), 1.0)),
    )
    if geometry.protocol not in ("same-operator", "alternating-energy"):
        raise ConfigError(
            "geometry.protocol: expected 'same-operator' or 'alternating-energy', "
            f"got {geometry.protocol!r}"
        )
    if geometry.protocol == "alternating-energy" and geometry.n_angles < 2:
        raise ConfigError("geometry.n_angles: alternating-energy needs at least 2 angles")

    co = _expect(raw.get("coefficients", {}), "coefficients")
    try:
        coefficients = AttenuationCoeffs(
            c11=float(_get(co, "c11", "coefficients", (int, float), PVC_IODINE.c11)),
            c12=float(_get(co, "c12", "coefficients", (int, float), PVC_IODINE.c12)),
            c21=float(_get(co, "c21", "coefficients", (int, float), PVC_IODINE.c21)),
            c22=float(_get(co, "c22", "coefficients", (int, float), PVC_IODINE.c22)),
        )
    except ValueError as exc:
        raise ConfigError(f"coefficients: {exc}") from exc

    noise_level = float(_get(raw, "noise_level", "config", (int, float), 0.01))
    if noise_level < 0:
        raise ConfigError("noise_level: must be non-negative")
    rotation_deg = float(_get(raw, "rotation_deg", "config", (int, float), 45.0))

    methods = _expect(raw.get("methods", {"ip": {}, "jtv": {}}), "methods")
    unknown = set(methods) - {"ip", "jtv"}
    if unknown:
        raise ConfigError(f"methods: unknown methods {sorted(unknown)}")

    ip = None
    if "ip" in methods:
        m = _expect(methods["ip"] or {}, "methods.ip")
        grid = m.get("alpha_grid")
        if grid is not None and (
            not isinstance(grid, list) or not all(isinstance(v, (int, float)) for v in grid)
        ):
            raise ConfigError("methods.ip.alpha_grid: expected a list of numbers")
        ip = IpSection(
            alpha=float(_get(m, "alpha", "methods.ip", (int, float), 150.0)),
            beta=(
                None
                if m.get("beta", 120.0) is None
                else float(_get(m, "beta", "methods.ip", (int, float), 120.0))
            ),
            beta_ratio=float(_get(m, "beta_ratio", "methods.ip", (int, float), 0.8)),
            alpha_grid=tuple(float(v) for v in grid) if grid else None,
            tol=float(_get(m, "tol", "methods.ip", (int, float), 1e-8)),
            max_iters=_get(m, "max_iters", "methods.ip", int, 100),
            n_correctors=_get(m, "n_correctors", "methods.ip", int, 3),
            neighbourhood_gamma=float(
                _get(m, "neighbourhood_gamma", "methods.ip", (int, float), 0.2)
            ),
            pcg_tol=float(_get(m, "pcg_tol", "methods.ip", (int, float), 1e-6)),
            pcg_max_iters=_get(m, "pcg_max_iters", "methods.ip", int, 2000),
            step_fraction=float(_get(m, "step_fraction", "methods.ip", (int, float), 0.995)),
            early_termination=bool(m.get("early_termination", False)),
        )
        beta = ip.beta if ip.beta is not None else ip.beta_ratio * ip.alpha
        if ip.alpha_grid is None and beta > ip.alpha:
            raise ConfigError("methods.ip: beta must not exceed alpha (convexity)")

    jtv = None
    if "jtv" in methods:
        m = _expect(methods["jtv"] or {}, "methods.jtv")
        grid = m.get("gamma_grid")
        if grid is not None and (
            not isinstance(grid, list) or not all(isinstance(v, (int, float)) for v in grid)
        ):
            raise ConfigError("methods.jtv.gamma_grid: expected a list of numbers")
        jtv = JtvSection(
            gamma=float(_get(m, "gamma", "methods.jtv", (int, float), 0.001)),
            gamma_grid=tuple(float(v) for v in grid) if grid else None,
            kappa=float(_get(m, "kappa", "methods.jtv", (int, float), 1e-6)),
            n_iters=_get(m, "n_iters", "methods.jtv", int, 400),
        )

    be = _expect(raw.get("bench", {}), "bench")
    sizes = be.get("sizes", [32])
    if not isinstance(sizes, list) or not all(isinstance(v, int) for v in sizes):
        raise ConfigError("bench.sizes: expected a list of integers")
    bench = BenchSection(
        sizes=tuple(sizes),
        alpha=float(_get(be, "alpha", "bench", (int, float), 500.0)),
        beta=float(_get(be, "beta", "bench", (int, float), 250.0)),
        early_termination=bool(be.get("early_termination", True)),
        tol=float(_get(be, "tol", "bench", (int, float), 1e-8)),
        max_iters=_get(be, "max_iters", "bench", int, 100),
    )
    if bench.beta > bench.alpha:
        raise ConfigError("bench: beta must not exceed alpha (convexity)")

    return ExperimentConfig(
        seed=seed,
        phantom=phantom,
        geometry=geometry,
        coefficients=coefficients,
        noise_level=noise_level,
        rotation_deg=rotation_deg,
        ip=ip,
        jtv=jtv,
        bench=bench,
    )


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    if raw is None:
        raw = {}
    return config_from_dict(raw)


def derive_seed(master: int, stream: int) -> int:
    """Stable sub-seed for one named noise stream of an experiment."""
    return int(np.random.SeedSequence(entropy=master, spawn_key=(stream,)).generate_state(1)[0])


_STREAM_PHANTOM = 0
_STREAM_NOISE = 1
_STREAM_RHO = 2


def build_geometries(cfg: ExperimentConfig, size: int | None = None) -> tuple[Geometry, Geometry]:
    """Low/high-energy geometries for the configured protocol.

    ``alternating-energy`` splits the angle set alternately between the two
    energies (distinct operators); otherwise both energies share all angles.
    """
    n = cfg.phantom.size if size is None else size
    g = cfg.geometry
    full = Geometry.parallel_beam(
        n, n_angles=g.n_angles, n_detectors=g.n_detectors, detector_spacing=g.detector_spacing
    )
    if g.protocol == "same-operator":
        return full, full
    angles = full.angles_deg
    low = Geometry.parallel_beam(
        n, n_detectors=g.n_detectors, detector_spacing=g.detector_spacing,
        angles_deg=angles[0::2],
    )
    high = Geometry.parallel_beam(
        n, n_detectors=g.n_detectors, detector_spacing=g.detector_spacing,
        angles_deg=angles[1::2],
    )
    return low, high


def make_phantom(cfg: ExperimentConfig) -> ImagePair:
    seed = cfg.phantom.seed
    if seed is None:
        seed = derive_seed(cfg.seed, _STREAM_PHANTOM)
    return generate(
        PhantomSpec(
            kind=cfg.phantom.kind,
            size=cfg.phantom.size,
            seed=seed,
            material1_path=cfg.phantom.material1_path,
            material2_path=cfg.phantom.material2_path,
        )
    )


def imaged_truth(phantom: ImagePair, rotation_deg: float) -> ImagePair:
    """Ground truth actually seen by the scanner: the rotated raster,
    re-binarized at one half (disjointness survives because the rotated
    materials still sum to at most one everywhere)."""
    if rotation_deg == 0.0:
        return phantom
    rotated = rotate_pair(phantom, rotation_deg)
    return ImagePair(
        (rotated.g1 > 0.5).astype(np.float64), (rotated.g2 > 0.5).astype(np.float64)
    )


def _n_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _write_pair(directory: Path, stem: str, pair: ImagePair, bits: int = 16) -> None:
    write_array(directory / f"{stem}_m1.dexc", pair.g1)
    write_array(directory / f"{stem}_m2.dexc", pair.g2)
    write_pgm(directory / f"{stem}_m1.pgm", pair.g1, bits=bits)
    write_pgm(directory / f"{stem}_m2.pgm", pair.g2, bits=bits)


def _provenance(cfg: ExperimentConfig) -> dict:
    canonical = json.dumps(cfg.to_dict(), sort_keys=True)
    import numba
    import scipy

    return {
        "config_sha256": hashlib.sha256(canonical.encode()).hexdigest(),
        "master_seed": cfg.seed,
        "derived_seeds": {
            "phantom": cfg.phantom.seed
            if cfg.phantom.seed is not None
            else derive_seed(cfg.seed, _STREAM_PHANTOM),
            "noise": derive_seed(cfg.seed, _STREAM_NOISE),
            "rho": derive_seed(cfg.seed, _STREAM_RHO),
        },
        "versions": {
            "dexct": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "numba": numba.__version__,
        },
    }


def run_experiment(cfg: ExperimentConfig, outdir, config_bytes: bytes | None = None) -> int:
    """Execute the full pipeline; returns 0 on success, 3 if any solver
    failed to converge (artifacts are still written)."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    if config_bytes is not None:
        (out / "config.yaml").write_bytes(config_bytes)
    else:
        with open(out / "config.yaml", "w", newline="\n") as fh:
            yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)

    with open(out / "provenance.json", "w", newline="\n") as fh:
        json.dump(_provenance(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")

    phantom = make_phantom(cfg)
    geo_low, geo_high = build_geometries(cfg)
    system = DualEnergySystem(cfg.coefficients, geo_low, geo_high)
    noise_seed = derive_seed(cfg.seed, _STREAM_NOISE)
    rho_seed = derive_seed(cfg.seed, _STREAM_RHO)

    measurement = simulate_measurement(
        phantom, system, cfg.noise_level, cfg.rotation_deg, seed=noise_seed
    )
    truth = imaged_truth(phantom, cfg.rotation_deg)

    phantom_dir = out / "phantom"
    phantom_dir.mkdir(exist_ok=True)
    _write_pair(phantom_dir, "phantom", phantom, bits=8)
    _write_pair(phantom_dir, "truth", truth, bits=8)
    sino_dir = out / "sino"
    sino_dir.mkdir(exist_ok=True)
    write_sinogram_pair(
        sino_dir,
        "data",
        measurement,
        {
            "coefficients": [cfg.coefficients.c11, cfg.coefficients.c12,
                             cfg.coefficients.c21, cfg.coefficients.c22],
            "noise_level": cfg.noise_level,
            "rotation_deg": cfg.rotation_deg,
            "noise_seed": noise_seed,
        },
    )

    status = {"converged": {}, "selected": {}}

    if cfg.ip is not None:
        ip_dir = out / "ip"
        ip_dir.mkdir(exist_ok=True)
        alpha = cfg.ip.alpha
        if cfg.ip.alpha_grid:
            from joblib import Parallel, delayed

            def run_one(a):
                w = RegWeights(a, cfg.ip.beta_ratio * a)
                pair, _ = ipm_solve(
                    measurement, cfg.coefficients, w, geo_low, geo_high,
                    cfg.ip.config(), rho_seed=rho_seed,
                )
                return pair

            recons = Parallel(n_jobs=_n_workers())(
                delayed(run_one)(a) for a in cfg.ip.alpha_grid
            )
            table = dict(zip(cfg.ip.alpha_grid, recons))
            alpha, results = select_regularization(
                list(cfg.ip.alpha_grid), lambda a: table[a], truth
            )
            write_csv(
                ip_dir / "selection.csv",
                "alpha,e_mean\n"
                + "".join(f"{a!r},{e!r}\n" for a, e in results),
            )
            status["selected"]["ip_alpha"] = alpha
        beta = cfg.ip.beta if (cfg.ip.beta is not None and not cfg.ip.alpha_grid) else (
            cfg.ip.beta_ratio * alpha
        )
        recon, report = ipm_solve(
            measurement, cfg.coefficients, RegWeights(alpha, beta),
            geo_low, geo_high, cfg.ip.config(), rho_seed=rho_seed,
        )
        status["converged"]["ip"] = report.converged
        _write_method_artifacts(ip_dir, "ip", recon, report.to_csv(), truth)

    if cfg.jtv is not None:
        jtv_dir = out / "jtv"
        jtv_dir.mkdir(exist_ok=True)
        gamma = cfg.jtv.gamma
        if cfg.jtv.gamma_grid:
            from joblib import Parallel, delayed

            def run_one_tv(gval):
                pair, _ = jtv_solve(measurement, system, cfg.jtv.config(gval))
                return pair

            recons = Parallel(n_jobs=_n_workers())(
                delayed(run_one_tv)(gval) for gval in cfg.jtv.gamma_grid
            )
            table = dict(zip(cfg.jtv.gamma_grid, recons))
            gamma, results = select_regularization(
                list(cfg.jtv.gamma_grid), lambda gval: table[gval], truth
            )
            write_csv(
                jtv_dir / "selection.csv",
                "gamma,e_mean\n" + "".join(f"{g!r},{e!r}\n" for g, e in results),
            )
            status["selected"]["jtv_gamma"] = gamma
        recon, report = jtv_solve(measurement, system, cfg.jtv.config(gamma))
        status["converged"]["jtv"] = not report.line_search_failed
        _write_method_artifacts(jtv_dir, "jtv", recon, report.to_csv(), truth)

    with open(out / "status.json", "w", newline="\n") as fh:
        json.dump(status, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0 if all(status["converged"].values()) else 3


def _write_method_artifacts(directory: Path, method: str, recon: ImagePair, report_csv: str, truth: ImagePair) -> None:
    from .metrics import segment_by_fraction

    _write_pair(directory, "recon", recon)
    write_csv(directory / "report.csv", report_csv)
    seg1, _ = segment_by_fraction(recon.g1, int(np.count_nonzero(truth.g1)))
    seg2, _ = segment_by_fraction(recon.g2, int(np.count_nonzero(truth.g2)))
    _write_pair(directory, "seg", ImagePair(seg1, seg2), bits=8)
    write_csv(directory / "metrics.csv", evaluate(recon, truth).to_csv(method=method))
    write_csv(directory / "recon_m1.csv", array_to_csv(recon.g1))
    write_csv(directory / "recon_m2.csv", array_to_csv(recon.g2))


def run_bench(cfg: ExperimentConfig) -> tuple[str, list[dict]]:
    """Size sweep of the interior point solver; one CSV row per image size
    with problem dimension, iteration counts, and wall time."""
    rows = []
    header = "n,dimension,ipm_iters,pcg_iters,seconds"
    for n in cfg.bench.sizes:
        sub = ExperimentConfig(
            seed=cfg.seed,
            phantom=PhantomSection(
                kind=cfg.phantom.kind if cfg.phantom.kind != "from-files" else "hy",
                size=n,
                seed=cfg.phantom.seed,
            ),
            geometry=cfg.geometry,
            coefficients=cfg.coefficients,
            noise_level=cfg.noise_level,
            rotation_deg=cfg.rotation_deg,
            ip=cfg.ip,
            jtv=None,
            bench=cfg.bench,
        )
        phantom = make_phantom(sub)
        geo_low, geo_high = build_geometries(sub, size=n)
        system = DualEnergySystem(cfg.coefficients, geo_low, geo_high)
        measurement = simulate_measurement(
            phantom, system, cfg.noise_level, cfg.rotation_deg,
            seed=derive_seed(cfg.seed, _STREAM_NOISE),
        )
        config = IpmConfig(
            tol=cfg.bench.tol,
            max_iters=cfg.bench.max_iters,
            early_termination=cfg.bench.early_termination,
        )
        _, report = ipm_solve(
            measurement, cfg.coefficients, RegWeights(cfg.bench.alpha, cfg.bench.beta),
            geo_low, geo_high, config, rho_seed=derive_seed(cfg.seed, _STREAM_RHO),
        )
        rows.append(
            {
                "n": n,
                "dimension": 2 * n * n,
                "ipm_iters": report.n_iterations,
                "pcg_iters": report.total_pcg_iters,
                "seconds": report.total_time_ms / 1e3,
                "converged": report.converged,
            }
        )
    csv = header + "\n" + "".join(
        f"{r['n']},{r['dimension']},{r['ipm_iters']},{r['pcg_iters']},{r['seconds']!r}\n"
        for r in rows
    )
    return csv, rows
