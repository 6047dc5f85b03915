"""Posterior summaries for fitted models: the approximate law of k,
expected component counts in intervals, residual extraction, intensity
overlays, and signal reconstruction with its error metric.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .model import (
    ApproxModel,
    ModelError,
    SampleSet,
    _component_log_mass,
    _log_interval_mass,
    model_intensity,
    sample_batch_from_model,
)

__all__ = [
    "SummaryReport",
    "approx_posterior_k",
    "expected_count_interval",
    "empirical_count_interval",
    "residuals",
    "bma_histogram_intensity",
    "intensity_curve",
    "reconstruct_bma",
    "reconstruct_from_model",
    "reconstruction_error_db",
    "summarize",
]

logger = logging.getLogger(__name__)

DB_FLOOR = -300.0


# ---------------------------------------------------------------------------
# law of the component count
# ---------------------------------------------------------------------------


def approx_posterior_k(model: ApproxModel, k_cap: int | None = None) -> np.ndarray:
    """Distribution of the total component count under the fitted model.

    The count is a sum of independent presence indicators plus a Poisson
    outlier count; the result is computed by exact convolution.  Mass
    beyond ``k_cap`` is folded into the last entry, so the vector always
    sums to one.
    """
    lam = model.lam
    if k_cap is None:
        k_cap = model.L + math.ceil(lam + 10.0 * math.sqrt(lam)) + 5
    if k_cap < 0:
        raise ModelError("k_cap must be nonnegative")

    binomial_part = np.ones(1)
    for pi in model.pis():
        binomial_part = np.convolve(binomial_part, [1.0 - pi, pi])

    if lam > 0.0:
        ks = np.arange(k_cap + 1)
        poisson_part = np.exp(ks * math.log(lam) - lam - gammaln(ks + 1.0))
    else:
        poisson_part = np.ones(1)

    full = np.convolve(binomial_part, poisson_part)
    out = np.zeros(k_cap + 1)
    head = min(full.size, k_cap)
    out[:head] = full[:head]
    out[k_cap] = 1.0 - out[:k_cap].sum()
    return out


# ---------------------------------------------------------------------------
# expected component counts in intervals
# ---------------------------------------------------------------------------


def _validate_interval(model: ApproxModel, interval) -> np.ndarray:
    box = np.atleast_2d(np.asarray(interval, dtype=float))
    if box.shape != (model.space.dim, 2):
        raise ModelError(f"interval must have shape ({model.space.dim}, 2)")
    if np.any(box[:, 0] > box[:, 1]):
        raise ModelError("interval lower bounds exceed upper bounds")
    lo, hi = model.space.bounds[:, 0], model.space.bounds[:, 1]
    if np.any(box[:, 0] < lo) or np.any(box[:, 1] > hi):
        raise ModelError("interval reaches outside the parameter box")
    return box


def expected_count_interval(model: ApproxModel, interval) -> float:
    """Mean number of components the fitted model places in a sub-box.

    Sums each gate probability times the truncated-Gaussian mass of the
    box, plus the share of the outlier rate proportional to volume.
    """
    box = _validate_interval(model, interval)
    widths = box[:, 1] - box[:, 0]
    total = model.lam * float(np.prod(widths / model.space.widths))
    if model.L:
        mus, sig = model.mus(), np.sqrt(model.sigma2s())
        alpha = (box[:, 0] - mus) / sig
        beta = (box[:, 1] - mus) / sig
        log_num = _log_interval_mass(alpha, beta).sum(axis=1)
        log_in_box = _component_log_mass(model).sum(axis=1)
        total += float(np.sum(model.pis() * np.exp(log_num - log_in_box)))
    return total


def empirical_count_interval(samples: SampleSet, interval) -> float:
    """Average over samples of the number of components inside the box."""
    box = np.atleast_2d(np.asarray(interval, dtype=float))
    if box.shape != (samples.space.dim, 2):
        raise ModelError(f"interval must have shape ({samples.space.dim}, 2)")
    if len(samples) == 0:
        raise ModelError("empty sample set")
    lo, hi = box[:, 0], box[:, 1]
    total = 0
    for s in samples.samples:
        if s.k:
            total += int(np.sum(np.all((s.components >= lo) & (s.components <= hi), axis=1)))
    return total / len(samples)


# ---------------------------------------------------------------------------
# residuals
# ---------------------------------------------------------------------------


def residuals(
    samples: SampleSet, allocations: list, L: int
) -> tuple[np.ndarray, np.ndarray]:
    """Components allocated to the outlier label, with their origins.

    Returns the (n, d) array of residual points and an (n, 2) array of
    (sample index, component index) pairs.  Binning for display is left
    to the output layer.
    """
    if len(allocations) != len(samples):
        raise ModelError("allocations do not align with the sample set")
    pts: list[np.ndarray] = []
    src: list[tuple[int, int]] = []
    for i, (s, z) in enumerate(zip(samples.samples, allocations)):
        labels = z.labels
        if labels.shape[0] != s.k:
            raise ModelError(f"allocation {i} has wrong length")
        for j in np.flatnonzero(labels == L + 1):
            pts.append(s.components[j])
            src.append((i, int(j)))
    d = samples.space.dim
    points = np.array(pts).reshape(-1, d)
    return points, np.array(src, dtype=np.int64).reshape(-1, 2)


# ---------------------------------------------------------------------------
# intensities
# ---------------------------------------------------------------------------


def bma_histogram_intensity(
    samples: SampleSet,
    bins=50,
    dim: int = 0,
    value_range: tuple[float, float] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Histogram of all components pooled across samples, scaled so the
    bars integrate to the mean number of components per sample.

    For multivariate samples ``dim`` selects the coordinate to pool.
    """
    if len(samples) == 0:
        raise ModelError("empty sample set")
    if not 0 <= dim < samples.space.dim:
        raise ModelError(f"dim {dim} out of range")
    pooled = [s.components[:, dim] for s in samples.samples if s.k]
    values = np.concatenate(pooled) if pooled else np.zeros(0)
    if value_range is None:
        value_range = tuple(samples.space.bounds[dim])
    counts, edges = np.histogram(values, bins=bins, range=value_range)
    heights = counts / (len(samples) * np.diff(edges))
    return heights, edges


def intensity_curve(model: ApproxModel, grid: np.ndarray) -> np.ndarray:
    """Component intensity of the fitted model on a grid of points."""
    g = np.asarray(grid, dtype=float)
    if g.ndim == 1:
        if model.space.dim != 1:
            raise ModelError("1-d grid given for a multivariate model")
        g = g[:, None]
    return np.asarray(model_intensity(g, model))


# ---------------------------------------------------------------------------
# reconstruction
# ---------------------------------------------------------------------------


def _mean_reconstruction(
    freqs: list[np.ndarray], y: np.ndarray, delta2: float, chunk: int = 8192
) -> np.ndarray:
    """Average of D(omega) a_hat(omega) over a list of frequency vectors."""
    n_total = len(freqs)
    if n_total == 0:
        raise ModelError("no draws to reconstruct from")
    N = y.size
    t = np.arange(N)
    shrink = delta2 / (1.0 + delta2)
    ks = np.array([w.size for w in freqs])
    acc = np.zeros(N)
    used = 0
    skipped = 0
    for k in sorted(set(ks.tolist())):
        idx = np.flatnonzero(ks == k)
        if k == 0:
            used += idx.size  # the empty model reconstructs the zero signal
            continue
        stacked = np.stack([freqs[i] for i in idx])
        for start in range(0, stacked.shape[0], chunk):
            W = stacked[start : start + chunk]
            ang = W[:, None, :] * t[None, :, None]
            D = np.empty((W.shape[0], N, 2 * k))
            D[:, :, 0::2] = np.cos(ang)
            D[:, :, 1::2] = np.sin(ang)
            G = np.einsum("nij,nik->njk", D, D)
            Dty = np.einsum("nij,i->nj", D, y)
            try:
                ahat = shrink * np.linalg.solve(G, Dty[:, :, None])[:, :, 0]
            except np.linalg.LinAlgError:
                ahat = np.full((W.shape[0], 2 * k), np.nan)
                for r in range(W.shape[0]):
                    try:
                        ahat[r] = shrink * np.linalg.solve(G[r], Dty[r])
                    except np.linalg.LinAlgError:
                        pass
            recon = np.einsum("nij,nj->ni", D, ahat)
            good = np.all(np.isfinite(recon), axis=1)
            acc += recon[good].sum(axis=0)
            used += int(good.sum())
            skipped += int((~good).sum())
    if used == 0:
        raise ModelError("every draw had a singular design")
    if skipped:
        logger.debug("reconstruction skipped %d singular draws", skipped)
    return acc / used


def reconstruct_bma(samples: SampleSet, y: np.ndarray, delta2: float) -> np.ndarray:
    """Model-averaged noiseless signal estimate from chain samples."""
    if samples.space.dim != 1:
        raise ModelError("reconstruction needs 1-d frequency samples")
    if len(samples) == 0:
        raise ModelError("empty sample set")
    y = np.asarray(y, dtype=float)
    return _mean_reconstruction([s.components[:, 0] for s in samples.samples], y, delta2)


def reconstruct_from_model(
    model: ApproxModel,
    y: np.ndarray,
    delta2: float,
    size: int,
    rng,
    include_outliers: bool = True,
) -> np.ndarray:
    """Noiseless signal estimate from draws of the fitted model.

    Frequencies are generated from the gated components (and, unless
    disabled, the outlier process); amplitudes come from their posterior
    mean given the observed signal.
    """
    if model.space.dim != 1:
        raise ModelError("reconstruction needs a 1-d model")
    if size < 1:
        raise ModelError("need at least one draw")
    y = np.asarray(y, dtype=float)
    source = model
    if not include_outliers:
        source = ApproxModel(model.space, list(model.components), 0.0)
    draws, _ = sample_batch_from_model(source, size, rng)
    return _mean_reconstruction([a[:, 0] for a in draws], y, delta2)


def reconstruction_error_db(y_hat: np.ndarray, y_ref: np.ndarray) -> float:
    """Energy of the estimation error relative to the reference, in dB."""
    y_hat = np.asarray(y_hat, dtype=float)
    y_ref = np.asarray(y_ref, dtype=float)
    if y_hat.shape != y_ref.shape:
        raise ModelError("shape mismatch")
    denom = float(y_ref @ y_ref)
    if denom <= 0.0:
        raise ModelError("reference signal has no energy")
    diff = y_hat - y_ref
    ratio = float(diff @ diff) / denom
    if ratio == 0.0:
        return DB_FLOOR
    return max(10.0 * math.log10(ratio), DB_FLOOR)


# ---------------------------------------------------------------------------
# the assembled report
# ---------------------------------------------------------------------------


@dataclass
class SummaryReport:
    """Tabular summary of a fitted model against its sample set."""

    mus: np.ndarray
    sds: np.ndarray
    pis: np.ndarray
    lam: float
    p_k: np.ndarray
    intervals: list = field(default_factory=list)
    residual_points: np.ndarray | None = None
    residual_fraction: float | None = None
    reconstruction_db: float | None = None

    def __post_init__(self):
        if abs(float(np.sum(self.p_k)) - 1.0) > 1e-9:
            raise ModelError("p_k does not sum to one")

    def to_dict(self) -> dict:
        out = {
            "components": [
                {"mu": m.tolist(), "sd": s.tolist(), "pi": float(p)}
                for m, s, p in zip(self.mus, self.sds, self.pis)
            ],
            "lambda": float(self.lam),
            "p_k": self.p_k.tolist(),
            "intervals": self.intervals,
        }
        if self.residual_points is not None:
            out["residuals"] = self.residual_points.tolist()
            out["residual_fraction"] = self.residual_fraction
        if self.reconstruction_db is not None:
            out["reconstruction_db"] = self.reconstruction_db
        return out


def summarize(
    model: ApproxModel,
    samples: SampleSet,
    allocations: list | None = None,
    intervals=(),
    reconstruction_db: float | None = None,
) -> SummaryReport:
    """Bundle the standard diagnostics for a fitted model."""
    entries = []
    for box in intervals:
        entries.append(
            {
                "bounds": np.atleast_2d(np.asarray(box, dtype=float)).tolist(),
                "model": expected_count_interval(model, box),
                "empirical": empirical_count_interval(samples, box),
            }
        )
    res_pts = None
    res_frac = None
    if allocations is not None:
        res_pts, _ = residuals(samples, allocations, model.L)
        res_frac = res_pts.shape[0] / len(samples)
    return SummaryReport(
        mus=model.mus(),
        sds=np.sqrt(model.sigma2s()),
        pis=model.pis(),
        lam=model.lam,
        p_k=approx_posterior_k(model),
        intervals=entries,
        residual_points=res_pts,
        residual_fraction=res_frac,
        reconstruction_db=reconstruction_db,
    )
