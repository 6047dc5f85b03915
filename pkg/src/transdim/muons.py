"""Forward model and reversible-jump sampler for photoelectron count traces.

Each muon deposits light according to a rise-then-decay pulse profile; the
detector histograms photoelectrons into fixed-width time bins, and the
counts are Poisson with means obtained by integrating the summed per-muon
intensities over each bin.  The chain explores (k, {(t, a)}) with uniform
arrival times over the observation window, a Gamma prior on amplitudes
(truncated to the amplitude box), and a truncated Poisson prior on k.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, xlogy

from .model import ModelError, ParamSpace, SampleSet

__all__ = [
    "PulseShape",
    "PECountSignal",
    "MuonParams",
    "AugerChainConfig",
    "auger_param_space",
    "pulse_density",
    "pulse_cdf",
    "expected_bin_counts",
    "log_likelihood_pe",
    "simulate_pe_signal",
    "rjmcmc_run_auger",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PulseShape:
    """Rise-then-decay time profile ``(1 - e^{-t/t_d}) e^{-t/tau}``.

    ``rise_time`` is the turn-on constant t_d and ``decay`` the exponential
    tail constant tau, both in nanoseconds.
    """

    rise_time: float = 15.0
    decay: float = 67.0

    def __post_init__(self):
        if not (self.rise_time > 0.0 and math.isfinite(self.rise_time)):
            raise ModelError(f"rise_time must be positive, got {self.rise_time}")
        if not (self.decay > 0.0 and math.isfinite(self.decay)):
            raise ModelError(f"decay must be positive, got {self.decay}")

    @property
    def norm(self) -> float:
        """Total mass of the unnormalized profile: tau^2 / (t_d + tau)."""
        return self.decay**2 / (self.rise_time + self.decay)


@dataclass(frozen=True)
class MuonParams:
    """Arrival time (ns) and expected photoelectron yield of one muon."""

    arrival: float
    amplitude: float

    def __post_init__(self):
        if not (self.amplitude > 0.0 and math.isfinite(self.amplitude)):
            raise ModelError(f"amplitude must be positive, got {self.amplitude}")
        if not math.isfinite(self.arrival):
            raise ModelError("arrival time must be finite")


@dataclass
class PECountSignal:
    """Binned photoelectron counts starting at ``t0`` with width ``t_delta``."""

    counts: np.ndarray
    t0: float = 0.0
    t_delta: float = 25.0

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 1 or c.size == 0:
            raise ModelError("counts must be a nonempty vector")
        if not np.all(np.isfinite(np.asarray(c, dtype=float))):
            raise ModelError("counts must be finite")
        if np.any(np.asarray(c, dtype=float) != np.round(np.asarray(c, dtype=float))):
            raise ModelError("counts must be integers")
        c = np.asarray(c, dtype=np.int64)
        if np.any(c < 0):
            raise ModelError("counts must be nonnegative")
        if not self.t_delta > 0.0:
            raise ModelError(f"t_delta must be positive, got {self.t_delta}")
        self.counts = c

    @property
    def n_bins(self) -> int:
        return self.counts.size

    def edges(self) -> np.ndarray:
        """The n_bins + 1 bin boundaries."""
        return self.t0 + self.t_delta * np.arange(self.n_bins + 1)

    @property
    def window(self) -> tuple[float, float]:
        """Observation window covered by the bins."""
        return (self.t0, self.t0 + self.t_delta * self.n_bins)


def auger_param_space(signal: PECountSignal, a_max: float = 500.0) -> ParamSpace:
    """Per-muon box: arrival over the observation window, amplitude in (0, a_max]."""
    lo, hi = signal.window
    return ParamSpace(np.array([[lo, hi], [0.0, float(a_max)]]))


def pulse_density(t, shape: PulseShape = PulseShape()):
    """Normalized pulse profile, zero before the arrival instant."""
    arr = np.asarray(t, dtype=float)
    out = np.zeros_like(arr)
    m = arr >= 0.0
    tm = arr[m]
    out[m] = -np.expm1(-tm / shape.rise_time) * np.exp(-tm / shape.decay) / shape.norm
    if np.isscalar(t) or arr.ndim == 0:
        return float(out)
    return out


def pulse_cdf(t, shape: PulseShape = PulseShape()):
    """Closed-form distribution function of ``pulse_density``.

    For t >= 0 this is [tau(1 - e^{-t/tau}) - c(1 - e^{-t/c})] / Z with
    c = t_d tau / (t_d + tau) and Z the normalization of the profile.
    """
    arr = np.asarray(t, dtype=float)
    tau = shape.decay
    c = shape.rise_time * tau / (shape.rise_time + tau)
    out = np.zeros_like(arr)
    m = arr > 0.0
    tm = arr[m]
    out[m] = (c * np.expm1(-tm / c) - tau * np.expm1(-tm / tau)) / shape.norm
    if np.isscalar(t) or arr.ndim == 0:
        return float(out)
    return out


def _muon_array(muons) -> np.ndarray:
    muons = list(muons) if not isinstance(muons, np.ndarray) else muons
    if len(muons) and isinstance(muons[0], MuonParams):
        arr = np.array([[m.arrival, m.amplitude] for m in muons], dtype=float)
    else:
        arr = np.asarray(muons, dtype=float).reshape(-1, 2)
    if arr.size and np.any(arr[:, 1] <= 0.0):
        raise ModelError("muon amplitudes must be positive")
    return arr


def expected_bin_counts(
    muons,
    signal: PECountSignal,
    shape: PulseShape = PulseShape(),
) -> np.ndarray:
    """Mean photoelectron count per bin for a set of muons.

    ``muons`` is a sequence of MuonParams or a (k, 2) array of (arrival,
    amplitude) rows.  Contributions are accumulated in a canonical order
    (sorted by arrival, then amplitude) so the result is bit-identical
    under permutation of the input.
    """
    arr = _muon_array(muons)
    n = signal.n_bins
    if arr.shape[0] == 0:
        return np.zeros(n)
    order = np.lexsort((arr[:, 1], arr[:, 0]))
    times, amps = arr[order, 0], arr[order, 1]
    # per-muon masses are clamped before accumulation so that a sum of
    # contributions is exactly the contribution of the combined set
    mass = np.diff(pulse_cdf(signal.edges()[None, :] - times[:, None], shape), axis=1)
    mass = np.maximum(mass, 0.0)
    out = np.zeros(n)
    for amp, row in zip(amps, mass):
        out += amp * row
    return out


def log_likelihood_pe(counts, expected) -> float:
    """Poisson log likelihood of the binned counts given the bin means.

    Uses the convention 0 log 0 = 0; a positive count in a bin with zero
    mean yields -inf.
    """
    n = np.asarray(counts, dtype=float)
    nbar = np.asarray(expected, dtype=float)
    if n.shape != nbar.shape:
        raise ModelError(f"length mismatch: {n.shape} counts vs {nbar.shape} means")
    if np.any(nbar < 0.0):
        raise ModelError("bin means must be nonnegative")
    with np.errstate(divide="ignore"):
        return float(np.sum(xlogy(n, nbar)) - np.sum(nbar) - np.sum(gammaln(n + 1.0)))


def simulate_pe_signal(
    muons,
    n_bins: int,
    shape: PulseShape = PulseShape(),
    t0: float = 0.0,
    t_delta: float = 25.0,
    seed=None,
) -> PECountSignal:
    """Draw a synthetic count trace: Poisson counts around the bin means."""
    if n_bins < 1:
        raise ModelError("n_bins must be at least 1")
    geometry = PECountSignal(np.zeros(n_bins, dtype=np.int64), t0, t_delta)
    nbar = expected_bin_counts(muons, geometry, shape)
    rng = np.random.default_rng(seed)
    return PECountSignal(rng.poisson(nbar), t0, t_delta)


@dataclass
class AugerChainConfig:
    """Settings for the trans-dimensional muon chain.

    Birth draws a new muon from the priors, death removes a uniformly
    chosen one, and the update move sweeps the current muons with a
    reflected random walk on arrivals and a log-scale random walk on
    amplitudes.  ``rate`` is the prior mean number of muons.
    """

    iterations: int = 20_000
    burn_in: int = 2_000
    thinning: int = 1
    k_max: int = 20
    rate: float = 3.0
    birth_prob: float = 0.25
    death_prob: float = 0.25
    update_prob: float = 0.5
    t_step: float = 20.0
    log_a_step: float = 0.3
    amp_alpha: float = 1.0
    amp_beta: float = 0.1
    a_max: float = 500.0
    pulse: PulseShape = field(default_factory=PulseShape)
    init_muons: tuple = ()
    rng_seed: int | None = None

    def __post_init__(self):
        if self.iterations < 1 or not 0 <= self.burn_in < self.iterations:
            raise ModelError("need 0 <= burn_in < iterations")
        if self.thinning < 1:
            raise ModelError("thinning must be at least 1")
        if self.k_max < 1:
            raise ModelError("k_max must be at least 1")
        probs = (self.birth_prob, self.death_prob, self.update_prob)
        if min(probs) < 0.0 or abs(sum(probs) - 1.0) > 1e-12:
            raise ModelError("move probabilities must be nonnegative and sum to 1")
        if not (self.rate > 0.0 and math.isfinite(self.rate)):
            raise ModelError("rate must be positive")
        if self.t_step <= 0.0 or self.log_a_step <= 0.0:
            raise ModelError("random-walk steps must be positive")
        if self.amp_alpha <= 0.0 or self.amp_beta <= 0.0:
            raise ModelError("amplitude prior parameters must be positive")
        if self.a_max <= 0.0:
            raise ModelError("a_max must be positive")
        if len(self.init_muons) > self.k_max:
            raise ModelError("more initial muons than k_max allows")


def _log_prob_ratio(num: float, den: float) -> float:
    """log(num/den) for move probabilities; a zero acts as a hard barrier."""
    if num == den:
        return 0.0
    if num == 0.0:
        return -math.inf
    if den == 0.0:
        return math.inf
    return math.log(num) - math.log(den)


def _default_init(signal: PECountSignal) -> np.ndarray:
    """A starting state with positive likelihood.

    A single muon at the window start keeps every bin mean strictly
    positive; an all-zero trace starts from the empty configuration.
    """
    total = int(signal.counts.sum())
    if total == 0:
        return np.zeros((0, 2))
    return np.array([[signal.window[0], float(max(total, 1))]])


def rjmcmc_run_auger(signal: PECountSignal, config: AugerChainConfig) -> SampleSet:
    """Run the trans-dimensional chain on a count trace.

    Returns the post-burn-in, thinned states as d=2 samples (arrival,
    amplitude), sorted by arrival, with acceptance diagnostics in the
    provenance record.
    """
    rng = np.random.default_rng(config.rng_seed)
    space = auger_param_space(signal, config.a_max)
    lo, hi = signal.window
    shape = config.pulse

    if config.init_muons:
        state = _muon_array(config.init_muons)
        if not np.all(space.contains(state)):
            raise ModelError("initial muons fall outside the parameter box")
        state = state[np.argsort(state[:, 0])]
    else:
        state = _default_init(signal)

    def loglik(muons: np.ndarray) -> float:
        return log_likelihood_pe(signal.counts, expected_bin_counts(muons, signal, shape))

    ll_cur = loglik(state)
    if not np.isfinite(ll_cur):
        raise ModelError("initial state has zero likelihood")

    def draw_amplitude() -> float:
        # the amplitude prior is Gamma truncated to (0, a_max]; resampling
        # implements the truncation exactly and essentially never loops
        while True:
            a = rng.gamma(config.amp_alpha, 1.0 / config.amp_beta)
            if 0.0 < a <= config.a_max:
                return float(a)

    log_rate = math.log(config.rate)
    log_db = _log_prob_ratio(config.death_prob, config.birth_prob)
    attempts = {"birth": 0, "death": 0, "update": 0}
    accepts = {"birth": 0, "death": 0, "update": 0}
    records: list[np.ndarray] = []

    for it in range(config.iterations):
        k = state.shape[0]
        u = rng.random()
        if u < config.birth_prob:
            # new muon from the priors; prior and proposal densities cancel
            attempts["birth"] += 1
            if k < config.k_max:
                new = np.array([[lo + (hi - lo) * rng.random(), draw_amplitude()]])
                prop = np.concatenate([state, new])
                ll_p = loglik(prop)
                log_r = ll_p - ll_cur + log_rate - math.log(k + 1) + log_db
                if math.log(rng.random()) < log_r:
                    state = prop[np.argsort(prop[:, 0])]
                    ll_cur = ll_p
                    accepts["birth"] += 1
        elif u < config.birth_prob + config.death_prob:
            attempts["death"] += 1
            if k > 0:
                idx = int(rng.integers(k))
                prop = np.delete(state, idx, axis=0)
                ll_p = loglik(prop)
                log_r = ll_p - ll_cur - log_rate + math.log(k) - log_db
                if math.log(rng.random()) < log_r:
                    state, ll_cur = prop, ll_p
                    accepts["death"] += 1
        else:
            for j in range(k):
                attempts["update"] += 1
                t_new = state[j, 0] + config.t_step * rng.standard_normal()
                while t_new < lo or t_new > hi:
                    if t_new < lo:
                        t_new = 2.0 * lo - t_new
                    if t_new > hi:
                        t_new = 2.0 * hi - t_new
                a_old = state[j, 1]
                a_new = a_old * math.exp(config.log_a_step * rng.standard_normal())
                if a_new > config.a_max:
                    continue
                prop = state.copy()
                prop[j] = (t_new, a_new)
                ll_p = loglik(prop)
                # Gamma prior ratio plus the log-walk Jacobian a_new/a_old
                log_r = (
                    ll_p - ll_cur
                    + config.amp_alpha * math.log(a_new / a_old)
                    - config.amp_beta * (a_new - a_old)
                )
                if math.log(rng.random()) < log_r:
                    state, ll_cur = prop, ll_p
                    accepts["update"] += 1
            if k:
                state = state[np.argsort(state[:, 0])]

        if it >= config.burn_in and (it - config.burn_in) % config.thinning == 0:
            records.append(state.copy())

    rates = {
        m: (accepts[m] / attempts[m] if attempts[m] else math.nan) for m in attempts
    }
    provenance = {
        "sampler": "auger-rjmcmc",
        "seed": config.rng_seed,
        "iterations": config.iterations,
        "burn_in": config.burn_in,
        "thinning": config.thinning,
        "extras": {
            "acceptance_rates": rates,
            "rate": config.rate,
            "k_max": config.k_max,
            "pulse": {"rise_time": shape.rise_time, "decay": shape.decay},
            "window": [lo, hi],
            "bins": signal.n_bins,
        },
    }
    return SampleSet.ingest(space, records, provenance)
