"""Two-energy measurement model, quadratic form, and data simulation.

The unknown is a pair of non-negative material images stacked into one
vector ``g = [g1; g2]``.  Measurements at low/high tube energy are

    m_low  = c11 * A_low g1  + c12 * A_low g2
    m_high = c21 * A_high g1 + c22 * A_high g2

which combine into one linear operator on the stacked vector.  The solver
works with the quadratic form built from the operator Gram blocks plus the
regularization coupling ``[[alpha, beta], [beta, alpha]]`` acting across
the two material channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import (
    Geometry,
    radon_adjoint,
    radon_adjoint_pair,
    radon_forward,
    radon_forward_pair,
)


@dataclass(frozen=True)
class AttenuationCoeffs:
    """Mass-attenuation constants, (material x energy), all positive."""

    c11: float
    c12: float
    c21: float
    c22: float

    def __post_init__(self):
        for name in ("c11", "c12", "c21", "c22"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")

    def f_low(self) -> np.ndarray:
        """Rank-one coupling of the low-energy Gram term."""
        return np.array(
            [[self.c11**2, self.c11 * self.c12], [self.c11 * self.c12, self.c12**2]]
        )

    def f_high(self) -> np.ndarray:
        return np.array(
            [[self.c21**2, self.c21 * self.c22], [self.c21 * self.c22, self.c22**2]]
        )


# NIST mass-attenuation values for PVC and iodine at 30/50 kV tube settings.
PVC_IODINE = AttenuationCoeffs(c11=1.491, c12=8.561, c21=0.456, c22=12.32)


@dataclass(frozen=True)
class RegWeights:
    """Tikhonov weight ``alpha`` and inner-product weight ``beta``.

    ``alpha >= beta`` keeps the quadratic program convex.
    """

    alpha: float
    beta: float

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.alpha < self.beta:
            raise ValueError("alpha must be >= beta (convexity)")


@dataclass(frozen=True)
class ImagePair:
    """Two material images of equal size."""

    g1: np.ndarray
    g2: np.ndarray

    def __post_init__(self):
        g1 = np.ascontiguousarray(self.g1, dtype=np.float64)
        g2 = np.ascontiguousarray(self.g2, dtype=np.float64)
        if g1.ndim != 2 or g1.shape[0] != g1.shape[1]:
            raise ValueError("material images must be square 2-D arrays")
        if g1.shape != g2.shape:
            raise ValueError("material images must have matching shapes")
        object.__setattr__(self, "g1", g1)
        object.__setattr__(self, "g2", g2)

    @property
    def size(self) -> int:
        return self.g1.shape[0]

    def stacked(self) -> np.ndarray:
        """Row-major flattening of both images into one vector of length 2 N^2."""
        return np.concatenate([self.g1.ravel(), self.g2.ravel()])

    @classmethod
    def from_stacked(cls, vec: np.ndarray, n: int) -> "ImagePair":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != 2 * n * n:
            raise ValueError(f"stacked vector length {vec.size} != 2*{n}^2")
        return cls(vec[: n * n].reshape(n, n).copy(), vec[n * n :].reshape(n, n).copy())


@dataclass(frozen=True)
class SinogramPair:
    """Low/high-energy sinograms with their geometries (possibly distinct)."""

    low: np.ndarray
    high: np.ndarray
    geo_low: Geometry
    geo_high: Geometry

    def __post_init__(self):
        low = np.ascontiguousarray(self.low, dtype=np.float64)
        high = np.ascontiguousarray(self.high, dtype=np.float64)
        if low.shape != self.geo_low.sinogram_shape:
            raise ValueError("low-energy sinogram does not match its geometry")
        if high.shape != self.geo_high.sinogram_shape:
            raise ValueError("high-energy sinogram does not match its geometry")
        if self.geo_low.n_pixels != self.geo_high.n_pixels:
            raise ValueError("geometries must address the same image grid")
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.low.ravel(), self.high.ravel()])


@dataclass(frozen=True)
class DualEnergySystem:
    """The combined two-energy projection operator and its quadratic form."""

    coeffs: AttenuationCoeffs
    geo_low: Geometry
    geo_high: Geometry

    def __post_init__(self):
        if self.geo_low.n_pixels != self.geo_high.n_pixels:
            raise ValueError("low/high geometries must share the pixel grid")

    @property
    def n_pixels(self) -> int:
        return self.geo_low.n_pixels

    @property
    def shared_operator(self) -> bool:
        return self.geo_low == self.geo_high

    def forward(self, pair: ImagePair) -> SinogramPair:
        """Apply the stacked measurement operator."""
        if pair.size != self.n_pixels:
            raise ValueError("image size does not match system geometry")
        c = self.coeffs
        a1_low, a2_low = radon_forward_pair(pair.g1, pair.g2, self.geo_low)
        if self.shared_operator:
            a1_high, a2_high = a1_low, a2_low
        else:
            a1_high, a2_high = radon_forward_pair(pair.g1, pair.g2, self.geo_high)
        low = c.c11 * a1_low + c.c12 * a2_low
        high = c.c21 * a1_high + c.c22 * a2_high
        return SinogramPair(low, high, self.geo_low, self.geo_high)

    def adjoint(self, m: SinogramPair) -> ImagePair:
        """Exact transpose of :meth:`forward`."""
        if m.geo_low != self.geo_low or m.geo_high != self.geo_high:
            raise ValueError("sinogram geometries do not match the system")
        c = self.coeffs
        if self.shared_operator:
            b_low, b_high = radon_adjoint_pair(m.low, m.high, self.geo_low)
        else:
            b_low = radon_adjoint(m.low, self.geo_low)
            b_high = radon_adjoint(m.high, self.geo_high)
        return ImagePair(
            c.c11 * b_low + c.c21 * b_high,
            c.c12 * b_low + c.c22 * b_high,
        )

    def gram_apply(self, pair: ImagePair) -> ImagePair:
        """Gram operator of the stacked measurement map (no regularization)."""
        return self.adjoint(self.forward(pair))

    def quadratic_apply(self, pair: ImagePair, weights: RegWeights) -> ImagePair:
        """Full system quadratic: Gram blocks plus the alpha/beta coupling.

        Evaluated matrix-free as forward+adjoint passes followed by the 2x2
        channel coupling ``[alpha*g1 + beta*g2; beta*g1 + alpha*g2]``.
        """
        gram = self.gram_apply(pair)
        a, b = weights.alpha, weights.beta
        return ImagePair(
            gram.g1 + a * pair.g1 + b * pair.g2,
            gram.g2 + b * pair.g1 + a * pair.g2,
        )


def inner_product_penalty(pair: ImagePair) -> float:
    """Material-separation penalty ``2 <g1, g2>``: zero only when the
    pointwise product vanishes, so for non-negative images it rewards at
    most one material per pixel."""
    return 2.0 * float(np.vdot(pair.g1, pair.g2))


def tikhonov_penalty(pair: ImagePair) -> float:
    """Squared 2-norm of the stacked vector."""
    return float(np.vdot(pair.g1, pair.g1) + np.vdot(pair.g2, pair.g2))


def data_objective(
    pair: ImagePair, m: SinogramPair, system: DualEnergySystem, weights: RegWeights
) -> float:
    """Reporting objective ``||m - A g||^2 + alpha ||g||^2 + beta * 2<g1,g2>``.

    The solver minimizes the equivalent quadratic-program objective
    ``-m^T A g + 0.5 g^T Q g`` (see :func:`qp_objective`); the two satisfy
    ``data_objective = 2 * qp_objective + ||m||^2`` exactly, differing by
    the data constant and a factor two.
    """
    res = m.stacked() - system.forward(pair).stacked()
    return (
        float(np.vdot(res, res))
        + weights.alpha * tikhonov_penalty(pair)
        + weights.beta * inner_product_penalty(pair)
    )


def qp_objective(
    pair: ImagePair, m: SinogramPair, system: DualEnergySystem, weights: RegWeights
) -> float:
    """Quadratic-program objective ``-m^T A g + 0.5 g^T Q g``."""
    g = pair.stacked()
    qg = system.quadratic_apply(pair, weights).stacked()
    return -float(np.vdot(m.stacked(), system.forward(pair).stacked())) + 0.5 * float(
        np.vdot(g, qg)
    )


def rotate_pair(pair: ImagePair, degrees: float) -> ImagePair:
    """Rotate both material images about the grid centre, bilinear."""
    if degrees == 0.0:
        return pair
    kw = dict(reshape=False, order=1, mode="constant", cval=0.0, prefilter=False)
    return ImagePair(
        ndimage.rotate(pair.g1, degrees, **kw),
        ndimage.rotate(pair.g2, degrees, **kw),
    )


def simulate_measurement(
    phantom: ImagePair,
    system: DualEnergySystem,
    noise_level: float = 0.01,
    rotation_deg: float = 45.0,
    seed: int = 0,
) -> SinogramPair:
    """Simulate noisy data while avoiding the inverse crime.

    The phantom is rotated on its raster (bilinear interpolation) before
    projection, so the object generating the data is not exactly re-rasterized
    by the reconstruction grid; white Gaussian noise scaled by
    ``noise_level * max(abs(m))`` is then added jointly over both sinograms.
    Gaussian variates come from numpy's ziggurat over the Philox counter-based
    generator, so results are reproducible bit-for-bit for a fixed seed.
    """
    if noise_level < 0:
        raise ValueError("noise_level must be non-negative")
    imaged = rotate_pair(phantom, rotation_deg)
    clean = system.forward(imaged)
    if noise_level == 0.0:
        return clean
    rng = np.random.Generator(np.random.Philox(seed))
    m = np.concatenate([clean.low.ravel(), clean.high.ravel()])
    scale = noise_level * float(np.max(np.abs(m)))
    noisy = m + scale * rng.standard_normal(m.size)
    n_low = clean.low.size
    return SinogramPair(
        noisy[:n_low].reshape(clean.low.shape),
        noisy[n_low:].reshape(clean.high.shape),
        system.geo_low,
        system.geo_high,
    )
