"""Fitting engine for the gated-Gaussian / point-process approximation.

A stochastic EM loop: each iteration updates every sample's allocation with
one Metropolis-Hastings transition (independent sequential proposal),
evaluates the completed negative log-likelihood, and re-estimates the model
parameters with robust statistics.  Components that attract too few samples
are pruned, and the returned model averages the final window of iterations.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp

from .model import (
    AllocationVector,
    ApproxModel,
    GaussianComponent,
    ModelError,
    SampleSet,
    VariableDimSample,
    _gaussian_log_densities,
    indicator_from_allocation,
    labeled_joint_log_density,
)

__all__ = [
    "FitConfig",
    "FitTrace",
    "FitResult",
    "PruneEvent",
    "choose_component_count",
    "initialize_model",
    "imh_allocation_step",
    "imh_batch_step",
    "mstep_robust",
    "mstep_exact",
    "kl_criterion_estimate",
    "sem_fit",
]

logger = logging.getLogger(__name__)

IQR_TO_SIGMA = 1.349  # Gaussian consistency factor for the interquartile range


@dataclass
class FitConfig:
    """Knobs for :func:`sem_fit`.

    ``init_rule`` selects how the component count L is chosen from the
    empirical distribution of k: ``"percentile"`` takes the smallest k whose
    CDF reaches ``percentile_for_L``, ``"threshold"`` the largest k whose
    probability is at least ``threshold_for_L``, and ``"fixed"`` uses
    ``fixed_L`` verbatim.
    """

    iterations: int = 100
    imh_inner_steps: int = 1
    averaging_window: int = 50
    prune_threshold: int = 10
    init_pi: float = 0.9
    init_lambda: float = 0.1
    percentile_for_L: float = 0.9
    rng_seed: int = 0
    init_rule: str = "percentile"
    threshold_for_L: float = 0.05
    fixed_L: int | None = None
    sigma2_floor: float = 1e-10

    def __post_init__(self):
        if self.iterations < 1 or self.imh_inner_steps < 1 or self.averaging_window < 1:
            raise ModelError("iterations, imh_inner_steps, averaging_window must be positive")
        if self.averaging_window > self.iterations:
            raise ModelError("averaging_window must not exceed iterations")
        if self.prune_threshold < 0:
            raise ModelError("prune_threshold must be nonnegative")
        if not (0.0 < self.percentile_for_L < 1.0):
            raise ModelError("percentile_for_L must lie in (0, 1)")
        if self.init_rule not in ("percentile", "threshold", "fixed"):
            raise ModelError(f"unknown init_rule {self.init_rule!r}")
        if self.init_rule == "fixed" and self.fixed_L is None:
            raise ModelError("init_rule 'fixed' requires fixed_L")
        if self.sigma2_floor <= 0:
            raise ModelError("sigma2_floor must be positive")


@dataclass
class FitTrace:
    """Per-iteration history: criterion, model snapshot, allocation counts.

    ``counts[r]`` has length L_r + 1: per-component sample counts followed
    by the total number of points sent to the outlier process.
    """

    criteria: list = field(default_factory=list)
    models: list = field(default_factory=list)
    counts: list = field(default_factory=list)
    accept_rates: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.criteria)


@dataclass(frozen=True)
class PruneEvent:
    iteration: int
    component: int
    allocated: int


@dataclass
class FitResult:
    model: ApproxModel
    trace: FitTrace
    allocations: list
    pruned: list
    notes: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def choose_component_count(k_values: np.ndarray, config: FitConfig) -> int:
    """Pick the number of Gaussian components from the empirical law of k."""
    ks = np.asarray(k_values, dtype=np.int64)
    if ks.size == 0:
        raise ModelError("no samples")
    if config.init_rule == "fixed":
        return int(config.fixed_L)
    pk = np.bincount(ks) / ks.size
    if config.init_rule == "percentile":
        cdf = np.cumsum(pk)
        return int(np.argmax(cdf >= config.percentile_for_L - 1e-12))
    hits = np.flatnonzero(pk >= config.threshold_for_L)
    if hits.size == 0:
        return int(np.argmax(pk))
    return int(hits[-1])


def initialize_model(samples: SampleSet, config: FitConfig) -> ApproxModel:
    """Starting model: L from the k-distribution, moments from sorted components.

    Each sample with k = L is sorted by its first coordinate; the median and
    scaled interquartile range of the l-th sorted component across those
    samples seed mu_l and sigma_l.  Falls back to samples with k >= L
    (taking the first L sorted components) when no sample has exactly k = L.
    """
    if len(samples) == 0:
        raise ModelError("cannot initialize from an empty sample set")
    space = samples.space
    L = choose_component_count(samples.k_values(), config)
    if L == 0:
        return ApproxModel(space, [], config.init_lambda)
    pool = [s.components for s in samples.samples if s.k == L]
    if not pool:
        pool = [s.components for s in samples.samples if s.k >= L]
        if not pool:
            raise ModelError(f"no samples with k >= {L} to initialize from")
        logger.warning(
            "no samples with k = %d; initializing from %d samples with k >= %d",
            L, len(pool), L,
        )
    stacked = np.stack(
        [c[np.argsort(c[:, 0], kind="stable")][:L] for c in pool]
    )  # (n, L, d)
    mu = np.median(stacked, axis=0)
    q25, q75 = np.percentile(stacked, [25.0, 75.0], axis=0)
    sigma2 = np.maximum(((q75 - q25) / IQR_TO_SIGMA) ** 2, config.sigma2_floor)
    comps = [GaussianComponent(mu[l], sigma2[l], config.init_pi) for l in range(L)]
    return ApproxModel(space, comps, config.init_lambda)


# ---------------------------------------------------------------------------
# Allocation transition (batched over samples that share the same k)
# ---------------------------------------------------------------------------


def _log_weights(points: np.ndarray, model: ApproxModel) -> np.ndarray:
    """Log allocation weights per point and label, shape (n, k, L+1).

    Gaussian labels weigh pi_l times the truncated density; the last column
    is the point-process intensity lam/|box|.
    """
    n, k, d = points.shape
    L = model.L
    if k == 0:
        return np.zeros((n, 0, L + 1))
    with np.errstate(divide="ignore"):
        log_pi = np.log(model.pis()) if L else np.zeros(0)
    log_out = (math.log(model.lam) if model.lam > 0 else -np.inf) - model.space.log_volume
    out = np.empty((n, k, L + 1))
    if L:
        logN = _gaussian_log_densities(points.reshape(n * k, d), model).reshape(n, k, L)
        out[:, :, :L] = logN + log_pi
    out[:, :, L] = log_out
    return out


def _closed_gate_term(used: np.ndarray, model: ApproxModel) -> np.ndarray:
    if model.L == 0:
        return np.zeros(used.shape[0])
    with np.errstate(divide="ignore"):
        log_1m = np.log1p(-model.pis())
    return np.where(used, 0.0, log_1m).sum(axis=1)


def _joint_logdens(logw: np.ndarray, Z: np.ndarray, model: ApproxModel, k: int) -> np.ndarray:
    """Joint log density of (sample, allocation) rows; Z is 0-based (n, k)."""
    n = Z.shape[0]
    L = model.L
    const = -model.lam - float(gammaln(k + 1))
    used = np.zeros((n, L), dtype=bool)
    if k == 0:
        return const + _closed_gate_term(used, model)
    for l in range(L):
        used[:, l] = np.any(Z == l, axis=1)
    picked = np.take_along_axis(logw, Z[:, :, None], axis=2)[:, :, 0]
    return const + picked.sum(axis=1) + _closed_gate_term(used, model)


def _sequential_propose(logw, order, gumbel, L):
    """Draw an allocation by visiting points along ``order`` without reusing
    Gaussian labels; returns 0-based labels and the log proposal probability
    (conditional on the visit order)."""
    n, k, _ = logw.shape
    rows = np.arange(n)
    avail = np.ones((n, L + 1), dtype=bool)
    Z = np.empty((n, k), dtype=np.int64)
    logrho = np.zeros(n)
    for t in range(k):
        j = order[:, t]
        w = np.where(avail, logw[rows, j, :], -np.inf)
        norm = logsumexp(w, axis=1)
        forced = np.isneginf(norm)
        pick = np.argmax(w + gumbel[:, t, :], axis=1)
        pick = np.where(forced, L, pick)
        with np.errstate(invalid="ignore"):
            logrho += np.where(forced, 0.0, w[rows, pick] - norm)
        Z[rows, j] = pick
        g = pick < L
        avail[rows[g], pick[g]] = False
    return Z, logrho


def _sequential_logprob(logw, order, Z, L):
    """Log probability that the sequential proposal along ``order`` yields Z."""
    n, k, _ = logw.shape
    rows = np.arange(n)
    avail = np.ones((n, L + 1), dtype=bool)
    logrho = np.zeros(n)
    for t in range(k):
        j = order[:, t]
        c = Z[rows, j]
        w = np.where(avail, logw[rows, j, :], -np.inf)
        norm = logsumexp(w, axis=1)
        forced = np.isneginf(norm)
        with np.errstate(invalid="ignore"):
            raw = w[rows, c] - norm
        logrho += np.where(forced, np.where(c == L, 0.0, -np.inf), raw)
        g = c < L
        avail[rows[g], c[g]] = False
    return logrho


def _imh_transition(points, Z0, model, rng):
    """One batched MH transition; Z0 is 0-based (n, k).

    Returns (new labels, accepted mask, joint log density of the new state).
    The same sampled visit order enters both proposal probabilities, so the
    order factor cancels from the acceptance ratio.  A current state of zero
    joint density is escaped unconditionally.
    """
    n, k, _ = points.shape
    L = model.L
    logw = _log_weights(points, model)
    joint_cur = _joint_logdens(logw, Z0, model, k)
    if k == 0:
        return Z0.copy(), np.ones(n, dtype=bool), joint_cur
    order = np.argsort(rng.random((n, k)), axis=1)
    gumbel = -np.log(-np.log(rng.random((n, k, L + 1))))
    Zp, lrho_p = _sequential_propose(logw, order, gumbel, L)
    lrho_c = _sequential_logprob(logw, order, Z0, L)
    joint_prop = _joint_logdens(logw, Zp, model, k)
    with np.errstate(invalid="ignore"):
        log_ratio = (joint_prop - joint_cur) + (lrho_c - lrho_p)
    log_ratio = np.where(np.isnan(log_ratio), -np.inf, log_ratio)
    with np.errstate(divide="ignore"):
        accept = np.log(rng.random(n)) < log_ratio
    accept |= np.isneginf(joint_cur)
    Z1 = np.where(accept[:, None], Zp, Z0)
    joint1 = np.where(accept, joint_prop, joint_cur)
    return Z1, accept, joint1


def imh_batch_step(points, labels, model, rng):
    """Batched allocation transition for n samples that share one k.

    Parameters
    ----------
    points : (n, k, d) array
    labels : (n, k) int array, 1-based (label L+1 is the outlier process)
    rng : numpy Generator or seed

    Returns
    -------
    (new_labels, accepted, joint_log_density), with labels again 1-based.
    """
    rng = np.random.default_rng(rng)
    points = np.asarray(points, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    Z1, accepted, joint = _imh_transition(points, labels - 1, model, rng)
    return Z1 + 1, accepted, joint


def imh_allocation_step(
    x: VariableDimSample, z_current: AllocationVector, model: ApproxModel, rng
) -> AllocationVector:
    """One MH transition of a single sample's allocation.

    The stationary law is the conditional of the allocation given the sample
    under ``model``.  On rejection the current allocation is returned.
    """
    rng = np.random.default_rng(rng)
    if x.k != z_current.k:
        raise ModelError(f"sample has k={x.k} but allocation has k={z_current.k}")
    indicator_from_allocation(z_current, model.L)
    if x.k == 0:
        return AllocationVector(np.array([], dtype=np.int64))
    Z1, _, _ = _imh_transition(x.components[None], z_current.labels[None] - 1, model, rng)
    return AllocationVector(Z1[0] + 1)


# ---------------------------------------------------------------------------
# M-step
# ---------------------------------------------------------------------------


def _mstep_core(pts, lab, M, L, space, previous, sigma2_floor, robust):
    """Shared parameter update from flattened (point, label) arrays.

    lab is 0-based; label L marks outlier points.  Gaussian labels occur at
    most once per sample, so per-label point counts equal per-label sample
    counts.
    """
    counts = np.bincount(lab, minlength=L + 1)
    pis = counts[:L] / M
    lam = counts[L] / M
    comps = []
    for l in range(L):
        sel = pts[lab == l]
        if sel.shape[0]:
            if robust:
                mu = np.median(sel, axis=0)
                q25, q75 = np.percentile(sel, [25.0, 75.0], axis=0)
                sigma2 = ((q75 - q25) / IQR_TO_SIGMA) ** 2
            else:
                mu = sel.mean(axis=0)
                sigma2 = sel.var(axis=0)
            sigma2 = np.maximum(sigma2, sigma2_floor)
        else:
            mu = previous.components[l].mu.copy()
            sigma2 = previous.components[l].sigma2.copy()
        comps.append(GaussianComponent(mu, sigma2, float(pis[l])))
    return ApproxModel(space, comps, float(lam)), counts


def _flatten_allocated(samples, allocations, L):
    d = samples.space.dim
    pts_list, lab_list = [], []
    for x, z in zip(samples.samples, allocations):
        if z.k != x.k:
            raise ModelError("allocation length does not match its sample")
        indicator_from_allocation(z, L)
        if x.k:
            pts_list.append(x.components)
            lab_list.append(z.labels - 1)
    if pts_list:
        return np.concatenate(pts_list), np.concatenate(lab_list)
    return np.zeros((0, d)), np.zeros(0, dtype=np.int64)


def mstep_robust(
    samples: SampleSet,
    allocations: list,
    L: int,
    previous: ApproxModel,
    sigma2_floor: float = 1e-10,
) -> ApproxModel:
    """Robust parameter update given allocations.

    pi_l is the fraction of samples containing component l; lam the mean
    outlier count; mu_l the per-coordinate median of allocated points and
    sigma_l their interquartile range over 1.349 (linearly interpolated
    quartiles).  A component with no allocated points keeps its previous
    (mu, sigma) and gets pi_l = 0.
    """
    M = len(samples)
    if M == 0 or M != len(allocations):
        raise ModelError("samples and allocations must align and be nonempty")
    pts, lab = _flatten_allocated(samples, allocations, L)
    model, _ = _mstep_core(pts, lab, M, L, samples.space, previous, sigma2_floor, robust=True)
    return model


def mstep_exact(
    samples: SampleSet,
    allocations: list,
    L: int,
    previous: ApproxModel,
    sigma2_floor: float = 1e-10,
) -> ApproxModel:
    """Mean/variance variant of the M-step (non-robust sufficient statistics)."""
    M = len(samples)
    if M == 0 or M != len(allocations):
        raise ModelError("samples and allocations must align and be nonempty")
    pts, lab = _flatten_allocated(samples, allocations, L)
    model, _ = _mstep_core(pts, lab, M, L, samples.space, previous, sigma2_floor, robust=False)
    return model


def kl_criterion_estimate(samples: SampleSet, allocations: list, model: ApproxModel) -> float:
    """Completed negative log-likelihood, summed over the sample set.

    Returns +inf when any sample/allocation pair has zero density under the
    model (a signal, not an error).
    """
    if len(samples) != len(allocations):
        raise ModelError("samples and allocations must align")
    total = 0.0
    for x, z in zip(samples.samples, allocations):
        total -= labeled_joint_log_density(x, z, model)
    return float(total)


# ---------------------------------------------------------------------------
# The fit loop
# ---------------------------------------------------------------------------


def _group_by_k(samples: SampleSet):
    ks = samples.k_values()
    d = samples.space.dim
    groups = {}
    for k in np.unique(ks):
        idx = np.flatnonzero(ks == k)
        if k == 0:
            P = np.zeros((idx.size, 0, d))
        else:
            P = np.stack([samples.samples[i].components for i in idx])
        groups[int(k)] = (idx, P)
    return groups


def sem_fit(samples: SampleSet, config: FitConfig) -> FitResult:
    """Fit the approximation by stochastic EM.

    Allocations warm-start across iterations (the per-sample chains simply
    continue under the updated model).  After each iteration any component
    with fewer than ``config.prune_threshold`` allocated samples is dropped
    and its points relabel to the outlier process; the final model averages
    parameters over the last ``averaging_window`` iterations that follow the
    last pruning event.
    """
    if len(samples) == 0:
        raise ModelError("cannot fit an empty sample set")
    rng = np.random.default_rng(config.rng_seed)
    model = initialize_model(samples, config)
    space = samples.space
    M = len(samples)
    groups = _group_by_k(samples)
    notes: list = []

    Z = {}
    for k in sorted(groups):
        idx, P = groups[k]
        if k == 0:
            Z[k] = np.zeros((idx.size, 0), dtype=np.int64)
            continue
        logw = _log_weights(P, model)
        order = np.argsort(rng.random((idx.size, k)), axis=1)
        gumbel = -np.log(-np.log(rng.random((idx.size, k, model.L + 1))))
        Z[k], _ = _sequential_propose(logw, order, gumbel, model.L)

    trace = FitTrace()
    pruned_log: list = []
    last_prune = -1
    for r in range(config.iterations):
        joint_total = 0.0
        n_accept = 0
        for k in sorted(groups):
            idx, P = groups[k]
            Zk = Z[k]
            for _ in range(config.imh_inner_steps):
                Zk, acc, joint = _imh_transition(P, Zk, model, rng)
            Z[k] = Zk
            joint_total += float(joint.sum())
            n_accept += int(acc.sum())
        criterion = -joint_total

        pts_list = [groups[k][1].reshape(-1, space.dim) for k in sorted(groups)]
        lab_list = [Z[k].reshape(-1) for k in sorted(groups)]
        pts = np.concatenate(pts_list) if pts_list else np.zeros((0, space.dim))
        lab = np.concatenate(lab_list) if lab_list else np.zeros(0, dtype=np.int64)
        new_model, counts = _mstep_core(
            pts, lab, M, model.L, space, model, config.sigma2_floor, robust=True
        )

        trace.criteria.append(criterion)
        trace.models.append(new_model)
        trace.counts.append(counts.copy())
        trace.accept_rates.append(n_accept / M)

        L_old = new_model.L
        keep = counts[:L_old] >= config.prune_threshold
        if L_old and not np.all(keep):
            for l in np.flatnonzero(~keep):
                ev = PruneEvent(iteration=r, component=int(l), allocated=int(counts[l]))
                pruned_log.append(ev)
                logger.info(
                    "iteration %d: pruning component %d (%d allocated samples)",
                    r, int(l), int(counts[l]),
                )
            survivors = [new_model.components[l] for l in np.flatnonzero(keep)]
            new_model = ApproxModel(space, survivors, new_model.lam)
            L_new = len(survivors)
            lut = np.full(L_old + 1, L_new, dtype=np.int64)
            lut[np.flatnonzero(keep)] = np.arange(L_new)
            for k in sorted(groups):
                if Z[k].size:
                    Z[k] = lut[Z[k]]
            last_prune = r
            if L_new == 0:
                notes.append(
                    f"all components pruned at iteration {r}; "
                    "continuing with the pure point-process model"
                )
                logger.warning(notes[-1])
        model = new_model

    usable = [i for i in range(config.iterations) if i > last_prune]
    if not usable:
        final = model
        notes.append(
            "pruning occurred at the final iteration; returning the last "
            "model without window averaging"
        )
    else:
        win = usable[-config.averaging_window:]
        snaps = [trace.models[i] for i in win]
        L = snaps[-1].L
        if L:
            mu = np.mean([s.mus() for s in snaps], axis=0)
            sigma2 = np.mean([s.sigma2s() for s in snaps], axis=0)
            pis = np.mean([s.pis() for s in snaps], axis=0)
            comps = [GaussianComponent(mu[l], sigma2[l], float(pis[l])) for l in range(L)]
        else:
            comps = []
        final = ApproxModel(space, comps, float(np.mean([s.lam for s in snaps])))

    allocations: list = [None] * M
    for k in sorted(groups):
        idx, _ = groups[k]
        for row, i in enumerate(idx):
            allocations[int(i)] = AllocationVector(Z[k][row] + 1)
    return FitResult(final, trace, allocations, pruned_log, notes)
