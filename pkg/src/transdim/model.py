"""Variable-dimensional parametric model: domain types and exact densities.

The model describes random draws ``(k, theta_1..theta_k)`` from a union of
subspaces of differing dimensionality.  It has ``L`` gated Gaussian
components (each present with probability ``pi_l``, truncated to a bounded
box) plus a homogeneous Poisson point process with mean count ``lam`` that
absorbs points none of the Gaussians explains.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, log_ndtr, ndtr, ndtri

__all__ = [
    "ParamSpace",
    "VariableDimSample",
    "AllocationVector",
    "GaussianComponent",
    "ApproxModel",
    "IndicatorVector",
    "SampleSet",
    "indicator_from_allocation",
    "allocation_log_prior",
    "component_log_density",
    "labeled_joint_log_density",
    "sample_from_model",
    "sample_batch_from_model",
    "model_intensity",
    "enumerate_allocations",
    "exact_allocation_log_posterior",
    "unlabeled_log_density",
]

LOG_2PI = math.log(2.0 * math.pi)


class ModelError(ValueError):
    """Invalid model, sample, or allocation input."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamSpace:
    """Bounded box of component parameters: ``d`` intervals ``(lo, hi)``."""

    bounds: np.ndarray

    def __post_init__(self):
        b = np.atleast_2d(np.asarray(self.bounds, dtype=float))
        if b.ndim != 2 or b.shape[1] != 2:
            raise ModelError(f"bounds must have shape (d, 2), got {b.shape}")
        if not np.all(np.isfinite(b)):
            raise ModelError("bounds must be finite")
        if not np.all(b[:, 0] < b[:, 1]):
            raise ModelError("each lower bound must be strictly below the upper bound")
        object.__setattr__(self, "bounds", b)

    @property
    def dim(self) -> int:
        return self.bounds.shape[0]

    @property
    def widths(self) -> np.ndarray:
        return self.bounds[:, 1] - self.bounds[:, 0]

    @property
    def volume(self) -> float:
        return float(np.prod(self.widths))

    @property
    def log_volume(self) -> float:
        return float(np.sum(np.log(self.widths)))

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Elementwise membership of points with shape (..., d)."""
        pts = np.asarray(points, dtype=float)
        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        return np.all((pts >= lo) & (pts <= hi), axis=-1)


@dataclass
class VariableDimSample:
    """One draw ``(k, theta_1..theta_k)``; components is a (k, d) array."""

    components: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.components, dtype=float)
        if c.size == 0:
            c = c.reshape(0, c.shape[1] if c.ndim == 2 else 1)
        if c.ndim != 2:
            raise ModelError(f"components must be a (k, d) array, got shape {c.shape}")
        self.components = c

    @property
    def k(self) -> int:
        return self.components.shape[0]

    @property
    def dim(self) -> int:
        return self.components.shape[1]


@dataclass
class AllocationVector:
    """Labels ``z_1..z_k`` in ``{1..L+1}``; label ``L+1`` is the point process."""

    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)

    @property
    def k(self) -> int:
        return self.labels.shape[0]


@dataclass
class GaussianComponent:
    """Axis-aligned Gaussian with presence probability ``pi``.

    ``pi = 0`` is tolerated so that re-estimation can hand back a component
    that attracted no samples (densities then signal ``-inf`` where the gate
    would need to be open); such components are meant to be pruned.
    """

    mu: np.ndarray
    sigma2: np.ndarray
    pi: float

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float).reshape(-1)
        self.sigma2 = np.asarray(self.sigma2, dtype=float).reshape(-1)
        if self.mu.shape != self.sigma2.shape:
            raise ModelError("mu and sigma2 must have the same length")
        if np.any(self.sigma2 <= 0):
            raise ModelError("sigma2 must be positive componentwise")
        if not (0.0 <= self.pi <= 1.0):
            raise ModelError(f"pi must lie in [0, 1], got {self.pi}")


@dataclass
class ApproxModel:
    """Fitted object: L gated Gaussians, outlier rate ``lam``, and the box."""

    space: ParamSpace
    components: list[GaussianComponent]
    lam: float

    def __post_init__(self):
        if self.lam < 0:
            raise ModelError(f"lam must be nonnegative, got {self.lam}")
        for comp in self.components:
            if comp.mu.shape[0] != self.space.dim:
                raise ModelError("component dimension does not match the space")

    @property
    def L(self) -> int:
        return len(self.components)

    def mus(self) -> np.ndarray:
        """Stacked means, shape (L, d)."""
        if not self.components:
            return np.zeros((0, self.space.dim))
        return np.stack([c.mu for c in self.components])

    def sigma2s(self) -> np.ndarray:
        if not self.components:
            return np.zeros((0, self.space.dim))
        return np.stack([c.sigma2 for c in self.components])

    def pis(self) -> np.ndarray:
        return np.array([c.pi for c in self.components])


@dataclass
class IndicatorVector:
    """Per-component presence counts; the last entry counts outlier points."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64).reshape(-1)

    @property
    def n_outliers(self) -> int:
        return int(self.counts[-1])


@dataclass
class SampleSet:
    """Ordered collection of variable-dimensional samples plus provenance.

    Samples whose components fall outside the box are rejected at ingestion
    (never clamped); ``rejected`` holds the count.
    """

    space: ParamSpace
    samples: list[VariableDimSample]
    provenance: dict = field(default_factory=dict)
    rejected: int = 0

    def __len__(self) -> int:
        return len(self.samples)

    def k_values(self) -> np.ndarray:
        return np.array([s.k for s in self.samples], dtype=np.int64)

    def empirical_posterior_k(self) -> np.ndarray:
        """Relative frequency of each k, indexed 0..max(k)."""
        ks = self.k_values()
        if ks.size == 0:
            raise ModelError("empty sample set")
        return np.bincount(ks) / ks.size

    @classmethod
    def ingest(
        cls,
        space: ParamSpace,
        raw: list[np.ndarray],
        provenance: dict | None = None,
    ) -> "SampleSet":
        """Build a SampleSet, dropping samples with out-of-box components."""
        kept: list[VariableDimSample] = []
        rejected = 0
        for arr in raw:
            arr = np.asarray(arr, dtype=float).reshape(-1, space.dim)
            if arr.shape[0] > 0 and not bool(np.all(space.contains(arr))):
                rejected += 1
                continue
            kept.append(VariableDimSample(arr))
        return cls(space, kept, provenance or {}, rejected)


# ---------------------------------------------------------------------------
# Truncated-normal helpers
# ---------------------------------------------------------------------------


def _log_interval_mass(alpha: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """log(Phi(beta) - Phi(alpha)) computed stably for alpha < beta."""
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    # reflect so the dominant term is evaluated in the left tail
    flip = alpha + beta > 0
    a = np.where(flip, -beta, alpha)
    b = np.where(flip, -alpha, beta)
    lb = log_ndtr(b)
    la = log_ndtr(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = lb + np.log1p(-np.exp(la - lb))
    return np.where(la == lb, -np.inf, out)


def _component_log_mass(model: ApproxModel) -> np.ndarray:
    """Per-component, per-dimension log box mass, shape (L, d)."""
    if model.L == 0:
        return np.zeros((0, model.space.dim))
    mus = model.mus()
    sig = np.sqrt(model.sigma2s())
    lo = model.space.bounds[:, 0]
    hi = model.space.bounds[:, 1]
    return _log_interval_mass((lo - mus) / sig, (hi - mus) / sig)


def _gaussian_log_densities(points: np.ndarray, model: ApproxModel) -> np.ndarray:
    """Box-truncated Gaussian log density of each point under each component.

    Parameters
    ----------
    points : (..., d) array of locations inside the box.

    Returns
    -------
    (..., L) array of log densities.
    """
    pts = np.asarray(points, dtype=float)
    if model.L == 0:
        return np.zeros(pts.shape[:-1] + (0,))
    mus = model.mus()
    sig2 = model.sigma2s()
    log_mass = _component_log_mass(model)
    diff = pts[..., None, :] - mus
    per_dim = -0.5 * (LOG_2PI + np.log(sig2)) - 0.5 * diff * diff / sig2 - log_mass
    return per_dim.sum(axis=-1)


def _truncated_normal_draws(
    mu: np.ndarray, sigma: np.ndarray, lo: np.ndarray, hi: np.ndarray, u: np.ndarray
) -> np.ndarray:
    """Inverse-CDF draws restricted to [lo, hi]; u are uniforms on (0, 1)."""
    clo = ndtr((lo - mu) / sigma)
    chi = ndtr((hi - mu) / sigma)
    x = mu + sigma * ndtri(clo + u * (chi - clo))
    return np.clip(x, lo, hi)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def indicator_from_allocation(z: AllocationVector, L: int) -> IndicatorVector:
    """Count how many points each label received.

    Raises if a label is out of range or a Gaussian label repeats (the
    allocation is then not a valid labeling).
    """
    labels = z.labels
    if labels.size and (labels.min() < 1 or labels.max() > L + 1):
        raise ModelError(f"labels must lie in 1..{L + 1}")
    counts = np.bincount(labels - 1, minlength=L + 1) if labels.size else np.zeros(L + 1, dtype=np.int64)
    if np.any(counts[:L] > 1):
        bad = int(np.argmax(counts[:L] > 1)) + 1
        raise ModelError(f"Gaussian label {bad} repeated: allocation is invalid")
    return IndicatorVector(counts)


def allocation_log_prior(z: AllocationVector, model: ApproxModel) -> float:
    """Log probability of an allocation vector under the model.

    Marginalizes nothing: this is log[ q(z | xi) q(xi) ] with xi the
    indicator implied by ``z``.  Returns ``-inf`` when a gate with pi = 1
    is closed (or pi would need to be 0), never raises for that case.
    """
    L = model.L
    xi = indicator_from_allocation(z, L).counts
    k = z.k
    n_out = int(xi[L])
    out = -model.lam - float(gammaln(k + 1))
    if n_out > 0:
        if model.lam == 0.0:
            return -np.inf
        out += n_out * math.log(model.lam)
    pis = model.pis()
    present = xi[:L] == 1
    with np.errstate(divide="ignore"):
        log_pi = np.log(pis)
        log_1m = np.log1p(-pis)
    out += float(np.sum(np.where(present, log_pi, log_1m)))
    return out


def component_log_density(theta: np.ndarray, label: int, model: ApproxModel) -> float:
    """Log density of one point given its source label.

    Gaussian labels use the box-truncated density; the outlier label uses
    the uniform density on the box.
    """
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if theta.shape[0] != model.space.dim:
        raise ModelError("theta dimension does not match the space")
    if not bool(model.space.contains(theta)):
        raise ModelError(f"theta {theta} lies outside the parameter box")
    L = model.L
    if not (1 <= label <= L + 1):
        raise ModelError(f"label must lie in 1..{L + 1}")
    if label == L + 1:
        return -model.space.log_volume
    return float(_gaussian_log_densities(theta, model)[label - 1])


def labeled_joint_log_density(
    x: VariableDimSample, z: AllocationVector, model: ApproxModel
) -> float:
    """Joint log density of a sample together with its allocation."""
    if x.k != z.k:
        raise ModelError(f"sample has k={x.k} but allocation has k={z.k}")
    if x.k and not bool(np.all(model.space.contains(x.components))):
        raise ModelError("sample has components outside the parameter box")
    L = model.L
    xi = indicator_from_allocation(z, L).counts
    n_out = int(xi[L])
    out = -model.lam - float(gammaln(x.k + 1))
    if n_out > 0:
        if model.lam == 0.0:
            return -np.inf
        out += n_out * (math.log(model.lam) - model.space.log_volume)
    if x.k:
        gauss = z.labels <= L
        if np.any(gauss):
            dens = _gaussian_log_densities(x.components[gauss], model)
            picked = dens[np.arange(int(gauss.sum())), z.labels[gauss] - 1]
            # canonical summation order: exact invariance under permuting
            # the (theta_j, z_j) pairs
            out += float(np.sort(picked).sum())
    pis = model.pis()
    present = xi[:L] == 1
    with np.errstate(divide="ignore"):
        log_pi = np.log(pis)
        log_1m = np.log1p(-pis)
    term = np.where(present, log_pi, log_1m)
    if np.any(np.isneginf(term)):
        return -np.inf
    return out + float(term.sum())


def sample_batch_from_model(
    model: ApproxModel, size: int, rng: np.random.Generator | int
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Draw many samples with their true allocations.

    Returns
    -------
    samples : list of (k_i, d) arrays
    labels : list of (k_i,) int arrays with values in 1..L+1
    """
    rng = np.random.default_rng(rng)
    L, d = model.L, model.space.dim
    lo, hi = model.space.bounds[:, 0], model.space.bounds[:, 1]
    pis = model.pis()
    present = rng.random((size, L)) < pis if L else np.zeros((size, 0), dtype=bool)
    n_out = rng.poisson(model.lam, size=size)
    k = present.sum(axis=1) + n_out
    k_max = int(k.max()) if size else 0

    points = np.zeros((size, k_max, d))
    labels = np.zeros((size, k_max), dtype=np.int64)
    mus, sig = model.mus(), np.sqrt(model.sigma2s())
    fill = np.zeros(size, dtype=np.int64)
    for l in range(L):
        rows = np.flatnonzero(present[:, l])
        if rows.size == 0:
            continue
        u = rng.random((rows.size, d))
        draws = _truncated_normal_draws(mus[l], sig[l], lo, hi, u)
        points[rows, fill[rows]] = draws
        labels[rows, fill[rows]] = l + 1
        fill[rows] += 1
    total_out = int(n_out.sum())
    if total_out:
        unif = lo + rng.random((total_out, d)) * (hi - lo)
        rows = np.repeat(np.arange(size), n_out)
        # positions fill[row], fill[row]+1, ... within each row
        offsets = np.arange(total_out) - np.repeat(np.cumsum(n_out) - n_out, n_out)
        points[rows, fill[rows] + offsets] = unif
        labels[rows, fill[rows] + offsets] = L + 1

    # uniform random arrangement of the k points in each row
    keys = rng.random((size, k_max)) if k_max else np.zeros((size, 0))
    keys[np.arange(k_max) >= k[:, None]] = np.inf
    order = np.argsort(keys, axis=1)
    points = np.take_along_axis(points, order[:, :, None], axis=1)
    labels = np.take_along_axis(labels, order, axis=1)

    out_samples = [points[i, : k[i]].copy() for i in range(size)]
    out_labels = [labels[i, : k[i]].copy() for i in range(size)]
    return out_samples, out_labels


def sample_from_model(
    model: ApproxModel, rng: np.random.Generator | int
) -> tuple[VariableDimSample, AllocationVector]:
    """Draw one sample and its true allocation from the generative model."""
    pts, labs = sample_batch_from_model(model, 1, rng)
    return VariableDimSample(pts[0]), AllocationVector(labs[0])


def model_intensity(theta: np.ndarray, model: ApproxModel) -> np.ndarray | float:
    """Expected component density at theta: sum of pi_l times each Gaussian.

    The point process term is deliberately excluded.  Accepts a single
    point (d,) or a batch (..., d).
    """
    theta = np.asarray(theta, dtype=float)
    scalar = theta.ndim == 1
    if not np.all(model.space.contains(theta)):
        raise ModelError("theta lies outside the parameter box")
    if model.L == 0:
        vals = np.zeros(theta.shape[:-1])
    else:
        dens = np.exp(_gaussian_log_densities(theta, model))
        vals = dens @ model.pis()
    return float(vals) if scalar else vals


# ---------------------------------------------------------------------------
# Exact enumeration (small k and L only)
# ---------------------------------------------------------------------------


def enumerate_allocations(k: int, L: int):
    """Yield every valid label tuple for k points: Gaussian labels unique."""
    for combo in itertools.product(range(1, L + 2), repeat=k):
        gauss = [c for c in combo if c <= L]
        if len(gauss) == len(set(gauss)):
            yield combo


def exact_allocation_log_posterior(
    x: VariableDimSample, model: ApproxModel
) -> tuple[list[tuple[int, ...]], np.ndarray]:
    """All allocations of x with normalized log posterior probabilities."""
    zs = list(enumerate_allocations(x.k, model.L))
    logs = np.array(
        [labeled_joint_log_density(x, AllocationVector(np.array(z, dtype=np.int64)), model) for z in zs]
    )
    m = logs.max()
    if not np.isfinite(m):
        raise ModelError("sample has zero density under the model")
    norm = m + math.log(np.exp(np.sort(logs) - m).sum())
    return zs, logs - norm


def unlabeled_log_density(x: VariableDimSample, model: ApproxModel) -> float:
    """Log density of x, marginalized over allocations by direct enumeration.

    Exponential in k and L; intended for tests and diagnostics on small
    instances.
    """
    zs = list(enumerate_allocations(x.k, model.L))
    logs = np.array(
        [labeled_joint_log_density(x, AllocationVector(np.array(z, dtype=np.int64)), model) for z in zs]
    )
    m = logs.max()
    if not np.isfinite(m):
        return -np.inf
    return float(m + math.log(np.exp(np.sort(logs) - m).sum()))
