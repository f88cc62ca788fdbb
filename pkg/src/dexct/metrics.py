"""Reconstruction quality measures and the two-phase evaluation protocol:
regularization strength is picked by the geometric mean of the relative
L2 errors, then reconstructions are segmented with the threshold that
yields the a-priori known number of material pixels and scored by the
fraction of wrongly labelled pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ImagePair


def l2_error(recon: np.ndarray, truth: np.ndarray) -> float:
    """Relative L2 error ``||truth - recon|| / ||truth||``."""
    recon = np.asarray(recon, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if recon.shape != truth.shape:
        raise ValueError("shapes must match")
    denom = float(np.linalg.norm(truth.ravel()))
    if denom == 0.0:
        raise ValueError("truth image is identically zero")
    return float(np.linalg.norm((truth - recon).ravel())) / denom


def _window_sums(img: np.ndarray, w: int) -> np.ndarray:
    """Exact sums over all w-by-w windows via the integral image."""
    pad = np.zeros((img.shape[0] + 1, img.shape[1] + 1))
    np.cumsum(np.cumsum(img, axis=0), axis=1, out=pad[1:, 1:])
    return pad[w:, w:] - pad[:-w, w:] - pad[w:, :-w] + pad[:-w, :-w]


def ssim(recon: np.ndarray, truth: np.ndarray, window: int = 8, k1: float = 0.01, k2: float = 0.03) -> float:
    """Structural similarity with a uniform sliding window.

    Population moments over every ``window x window`` patch, stabilizers
    ``C1 = (k1 L)^2`` and ``C2 = (k2 L)^2`` with dynamic range
    ``L = max(truth) - min(truth)``, averaged over all window positions.
    """
    recon = np.asarray(recon, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if recon.shape != truth.shape:
        raise ValueError("shapes must match")
    w = min(window, min(truth.shape))
    span = float(truth.max() - truth.min())
    if span == 0.0:
        span = 1.0
    c1 = (k1 * span) ** 2
    c2 = (k2 * span) ** 2
    area = w * w
    mu_x = _window_sums(recon, w) / area
    mu_y = _window_sums(truth, w) / area
    var_x = _window_sums(recon * recon, w) / area - mu_x * mu_x
    var_y = _window_sums(truth * truth, w) / area - mu_y * mu_y
    cov = _window_sums(recon * truth, w) / area - mu_x * mu_y
    score = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    )
    return float(np.mean(score))


def segment_by_fraction(recon: np.ndarray, target_count: int) -> tuple[np.ndarray, float]:
    """Binary mask with (up to ties) exactly ``target_count`` ones.

    The threshold is the value of the ``target_count``-th largest pixel;
    pixels strictly above it are set, and ties at the threshold are
    resolved in stable row-major pixel order until the target is reached.
    The labelling depends only on the ranking of the pixel values, so any
    strictly monotone rescaling of ``recon`` yields the same mask.
    """
    recon = np.asarray(recon, dtype=np.float64)
    n_total = recon.size
    if not 0 <= target_count <= n_total:
        raise ValueError(f"target_count must lie in [0, {n_total}]")
    flat = recon.ravel()
    mask = np.zeros(n_total, dtype=np.float64)
    if target_count == 0:
        return mask.reshape(recon.shape), float("inf")
    order = np.argsort(-flat, kind="stable")
    mask[order[:target_count]] = 1.0
    threshold = float(flat[order[target_count - 1]])
    return mask.reshape(recon.shape), threshold


def misclassification(seg: ImagePair, truth: ImagePair) -> float:
    """Fraction of pixels whose (material 1, material 2) label tuple is wrong.

    A pixel mislabelled in both materials counts once; the denominator is
    the total pixel count.
    """
    if seg.size != truth.size:
        raise ValueError("segmentation and truth sizes must match")
    wrong = (seg.g1 != truth.g1) | (seg.g2 != truth.g2)
    return float(np.count_nonzero(wrong)) / seg.g1.size


def material_misclassification(seg: np.ndarray, truth: np.ndarray) -> float:
    """Fraction of pixels mislabelled in one material image."""
    seg = np.asarray(seg)
    truth = np.asarray(truth)
    if seg.shape != truth.shape:
        raise ValueError("shapes must match")
    return float(np.count_nonzero(seg != truth)) / seg.size


@dataclass(frozen=True)
class MetricsReport:
    l2_error_1: float
    l2_error_2: float
    e_mean: float
    ssim_1: float
    ssim_2: float
    misclassification: float
    misclassification_1: float
    misclassification_2: float
    threshold_1: float
    threshold_2: float

    def to_csv(self, method: str = "") -> str:
        """Two rows (one per material): L2, SSIM, misclassification, plus the
        shared geometric-mean error and pair-label misclassification."""
        lines = ["method,material,l2_error,ssim,misclassification,e_mean,pair_misclassification"]
        for mat, l2v, sv, mis in (
            (1, self.l2_error_1, self.ssim_1, self.misclassification_1),
            (2, self.l2_error_2, self.ssim_2, self.misclassification_2),
        ):
            lines.append(
                f"{method},{mat},{l2v!r},{sv!r},{mis!r},{self.e_mean!r},{self.misclassification!r}"
            )
        return "\n".join(lines) + "\n"


def evaluate(recon: ImagePair, truth: ImagePair) -> MetricsReport:
    """Full quality report of a reconstruction against a binary truth pair.

    Segmentation targets come from the truth occupancy counts (the a-priori
    known material amounts).
    """
    seg1, thr1 = segment_by_fraction(recon.g1, int(np.count_nonzero(truth.g1)))
    seg2, thr2 = segment_by_fraction(recon.g2, int(np.count_nonzero(truth.g2)))
    e1 = l2_error(recon.g1, truth.g1)
    e2 = l2_error(recon.g2, truth.g2)
    return MetricsReport(
        l2_error_1=e1,
        l2_error_2=e2,
        e_mean=float(np.sqrt(e1 * e2)),
        ssim_1=ssim(recon.g1, truth.g1),
        ssim_2=ssim(recon.g2, truth.g2),
        misclassification=misclassification(ImagePair(seg1, seg2), truth),
        misclassification_1=material_misclassification(seg1, truth.g1),
        misclassification_2=material_misclassification(seg2, truth.g2),
        threshold_1=thr1,
        threshold_2=thr2,
    )


def select_regularization(candidates, reconstruct, truth: ImagePair):
    """Phase-1 parameter choice: smallest geometric-mean L2 error wins.

    ``reconstruct`` maps a candidate value to an :class:`ImagePair`; ties
    (within floating-point equality) go to the smaller candidate, which
    preserves more data fit.  Returns ``(best, results)`` where results is
    a list of ``(candidate, e_mean)`` pairs in input order.
    """
    if not candidates:
        raise ValueError("need at least one candidate")
    results = []
    for value in candidates:
        recon = reconstruct(value)
        e1 = l2_error(recon.g1, truth.g1)
        e2 = l2_error(recon.g2, truth.g2)
        results.append((value, float(np.sqrt(e1 * e2))))
    best = min(results, key=lambda t: (t[1], t[0]))[0]
    return best, results
