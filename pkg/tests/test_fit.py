"""Fitting engine: initialization, allocation transitions, robust updates,
pruning, and the full stochastic EM loop.

Distribution-level checks use exact enumeration of the allocation
conditional as the oracle; the end-to-end fit is checked against data drawn
from a known model.
"""

import logging
import math

import numpy as np
import pytest

from transdim.fit import (
    FitConfig,
    choose_component_count,
    imh_allocation_step,
    imh_batch_step,
    initialize_model,
    kl_criterion_estimate,
    mstep_exact,
    mstep_robust,
    sem_fit,
)
from transdim.model import (
    AllocationVector,
    ApproxModel,
    GaussianComponent,
    ModelError,
    ParamSpace,
    SampleSet,
    VariableDimSample,
    exact_allocation_log_posterior,
    indicator_from_allocation,
    labeled_joint_log_density,
    sample_batch_from_model,
)


def make_model(bounds, mus, sigma2s, pis, lam):
    space = ParamSpace(np.asarray(bounds, dtype=float))
    comps = [
        GaussianComponent(np.atleast_1d(m), np.atleast_1d(s), p)
        for m, s, p in zip(mus, sigma2s, pis)
    ]
    return ApproxModel(space, comps, lam)


def as_sampleset(space, arrays, **prov):
    return SampleSet.ingest(space, [np.asarray(a, dtype=float).reshape(-1, space.dim) for a in arrays], prov)


# ---------------------------------------------------------------------------
# choosing L and initialization
# ---------------------------------------------------------------------------


def test_component_count_percentile_rule():
    # 1000 samples with p(k=1)=0.3, p(2)=0.4, p(3)=0.203, p(4)=0.097
    ks = np.repeat([1, 2, 3, 4], [300, 400, 203, 97])
    cfg = FitConfig(percentile_for_L=0.9)
    assert choose_component_count(ks, cfg) == 3


def test_component_count_threshold_rule():
    ks = np.repeat([1, 2, 3, 4, 6], [300, 400, 203, 60, 37])
    cfg = FitConfig(init_rule="threshold", threshold_for_L=0.05)
    assert choose_component_count(ks, cfg) == 4
    cfg2 = FitConfig(init_rule="threshold", threshold_for_L=0.25)
    assert choose_component_count(ks, cfg2) == 2


def test_component_count_fixed_rule():
    cfg = FitConfig(init_rule="fixed", fixed_L=5)
    assert choose_component_count(np.array([1, 2, 3]), cfg) == 5
    with pytest.raises(ModelError):
        FitConfig(init_rule="fixed")


def test_initialize_all_empty_samples_gives_pure_point_process():
    space = ParamSpace(np.array([[0.0, 1.0]]))
    ss = as_sampleset(space, [np.zeros((0, 1))] * 20)
    model = initialize_model(ss, FitConfig())
    assert model.L == 0
    assert model.lam == pytest.approx(0.1)


def test_initialize_recovers_means_of_known_model():
    true = make_model([(0.0, 1.0)], [[0.3], [0.7]], [[0.0016], [0.0016]], [0.95, 0.9], 0.1)
    raw, _ = sample_batch_from_model(true, 4000, np.random.default_rng(2))
    ss = SampleSet.ingest(true.space, raw)
    model = initialize_model(ss, FitConfig())
    assert model.L == 2
    mus = np.sort(model.mus()[:, 0])
    assert abs(mus[0] - 0.3) < 0.05
    assert abs(mus[1] - 0.7) < 0.05
    assert model.pis().tolist() == [0.9, 0.9]
    assert model.lam == pytest.approx(0.1)


def test_initialize_fallback_uses_larger_samples(caplog):
    space = ParamSpace(np.array([[0.0, 1.0]]))
    rng = np.random.default_rng(0)
    arrays = [np.sort(rng.random(3)).reshape(3, 1) for _ in range(30)]
    ss = as_sampleset(space, arrays)
    cfg = FitConfig(init_rule="fixed", fixed_L=2)
    with caplog.at_level(logging.WARNING, logger="transdim.fit"):
        model = initialize_model(ss, cfg)
    assert model.L == 2
    assert any("k >= 2" in rec.message for rec in caplog.records)


def test_initialize_errors_when_fixed_L_unreachable():
    space = ParamSpace(np.array([[0.0, 1.0]]))
    ss = as_sampleset(space, [np.array([[0.5]])] * 5)
    with pytest.raises(ModelError):
        initialize_model(ss, FitConfig(init_rule="fixed", fixed_L=3))


# ---------------------------------------------------------------------------
# allocation transition
# ---------------------------------------------------------------------------


@pytest.fixture
def ambiguous_model():
    return make_model(
        [(0.0, 1.0)], [[0.3], [0.7]], [[0.0225], [0.0225]], [0.7, 0.4], 0.5
    )


def test_imh_empty_sample_is_identity(ambiguous_model):
    x = VariableDimSample(np.zeros((0, 1)))
    z = AllocationVector(np.array([], dtype=int))
    out = imh_allocation_step(x, z, ambiguous_model, 0)
    assert out.k == 0


def test_imh_single_state_always_accepts():
    # pi=1 and lam=0: the only valid allocation of a 1-point sample is (1)
    model = make_model([(0.0, 1.0)], [[0.5]], [[0.01]], [1.0], 0.0)
    P = np.full((1000, 1, 1), 0.5)
    Z = np.ones((1000, 1), dtype=np.int64)
    Z1, accepted, _ = imh_batch_step(P, Z, model, np.random.default_rng(3))
    assert np.all(Z1 == 1)
    assert np.all(accepted)


def test_imh_validates_current_allocation(ambiguous_model):
    x = VariableDimSample(np.array([[0.4], [0.6]]))
    with pytest.raises(ModelError):
        imh_allocation_step(x, AllocationVector(np.array([1, 1])), ambiguous_model, 0)
    with pytest.raises(ModelError):
        imh_allocation_step(x, AllocationVector(np.array([1])), ambiguous_model, 0)


def _tv(freqs: dict, exact: dict) -> float:
    keys = set(freqs) | set(exact)
    return 0.5 * sum(abs(freqs.get(t, 0.0) - exact.get(t, 0.0)) for t in keys)


def test_imh_one_step_preserves_exact_conditional(ambiguous_model):
    """Start 1e5 replicates at the exact allocation conditional, apply one
    transition, and require the state law to stay put (TV below 0.02)."""
    x = VariableDimSample(np.array([[0.45], [0.58]]))
    zs, logp = exact_allocation_log_posterior(x, ambiguous_model)
    probs = np.exp(logp)
    rng = np.random.default_rng(17)
    n = 100_000
    draw = rng.choice(len(zs), size=n, p=probs)
    Z0 = np.array(zs, dtype=np.int64)[draw]
    P = np.broadcast_to(x.components, (n, 2, 1)).copy()
    Z1, _, _ = imh_batch_step(P, Z0, ambiguous_model, rng)
    uniq, counts = np.unique(Z1, axis=0, return_counts=True)
    freqs = {tuple(u): c / n for u, c in zip(uniq, counts)}
    exact = {tuple(z): p for z, p in zip(zs, probs)}
    assert _tv(freqs, exact) < 0.02


def test_imh_long_run_occupancy_matches_enumeration(ambiguous_model):
    """A single-sample chain visits the three reachable allocations with the
    exact conditional frequencies (over 1e5 pooled transitions)."""
    x = VariableDimSample(np.array([[0.52]]))
    zs, logp = exact_allocation_log_posterior(x, ambiguous_model)
    exact = {z[0]: p for z, p in zip(zs, np.exp(logp))}
    rng = np.random.default_rng(29)
    chains, steps, burn = 500, 220, 20
    P = np.broadcast_to(x.components, (chains, 1, 1)).copy()
    Z = np.full((chains, 1), 3, dtype=np.int64)  # start everything at the sink
    occupancy = np.zeros(4)
    for t in range(steps):
        Z, _, _ = imh_batch_step(P, Z, ambiguous_model, rng)
        if t >= burn:
            occupancy += np.bincount(Z[:, 0], minlength=4)
    freqs = {lab: occupancy[lab] / occupancy.sum() for lab in (1, 2, 3)}
    assert _tv(freqs, exact) < 0.02


def test_imh_outputs_stay_valid_allocations(ambiguous_model):
    rng = np.random.default_rng(5)
    P = rng.random((200, 3, 1))
    Z = np.full((200, 3), 3, dtype=np.int64)
    for _ in range(10):
        Z, _, _ = imh_batch_step(P, Z, ambiguous_model, rng)
        for row in Z:
            indicator_from_allocation(AllocationVector(row), 2)


def test_imh_forced_sink_when_rate_is_zero():
    # lam=0 and a closed-out component set forces the sink, which has zero
    # density; the chain must still move (never crash, never stall forever)
    model = make_model([(0.0, 1.0)], [[0.5]], [[0.0001]], [1.0], 0.0)
    P = np.array([[[0.5], [0.99]]])  # second point far from the component
    Z = np.array([[1, 2]], dtype=np.int64)
    rng = np.random.default_rng(11)
    Z1, _, joint = imh_batch_step(P, Z, model, rng)
    assert Z1.shape == (1, 2)
    assert np.isneginf(joint) or np.isfinite(joint)


def test_batch_joint_matches_reference_density(ambiguous_model):
    rng = np.random.default_rng(13)
    P = rng.random((50, 2, 1))
    Z = np.full((50, 2), 3, dtype=np.int64)
    Z1, _, joint = imh_batch_step(P, Z, ambiguous_model, rng)
    for i in range(50):
        ref = labeled_joint_log_density(
            VariableDimSample(P[i]), AllocationVector(Z1[i]), ambiguous_model
        )
        assert joint[i] == pytest.approx(ref, rel=1e-9, abs=1e-9)


# ---------------------------------------------------------------------------
# M-step
# ---------------------------------------------------------------------------


def test_mstep_median_and_iqr():
    space = ParamSpace(np.array([[0.0, 6.0]]))
    ss = as_sampleset(space, [np.array([[float(v)]]) for v in (1, 2, 3, 4, 5)])
    allocs = [AllocationVector(np.array([1]))] * 5
    prev = make_model([(0.0, 6.0)], [[3.0]], [[1.0]], [0.5], 0.1)
    model = mstep_robust(ss, allocs, 1, prev)
    assert model.components[0].mu[0] == pytest.approx(3.0)
    assert math.sqrt(model.components[0].sigma2[0]) == pytest.approx(2.0 / 1.349, rel=1e-12)
    assert model.components[0].pi == 1.0
    assert model.lam == 0.0


def test_mstep_counts_presence_and_outliers():
    # component 1 present in 60 of 100 samples; 30 sink points in total
    space = ParamSpace(np.array([[0.0, 1.0]]))
    rng = np.random.default_rng(0)
    arrays, allocs = [], []
    for _ in range(60):
        arrays.append(rng.random((1, 1)))
        allocs.append(AllocationVector(np.array([1])))
    for _ in range(30):
        arrays.append(rng.random((1, 1)))
        allocs.append(AllocationVector(np.array([2])))
    for _ in range(10):
        arrays.append(np.zeros((0, 1)))
        allocs.append(AllocationVector(np.array([], dtype=int)))
    ss = as_sampleset(space, arrays)
    prev = make_model([(0.0, 1.0)], [[0.5]], [[0.01]], [0.5], 0.1)
    model = mstep_robust(ss, allocs, 1, prev)
    assert model.components[0].pi == pytest.approx(0.6)
    assert model.lam == pytest.approx(0.3)


def test_mstep_keeps_previous_parameters_for_empty_component():
    space = ParamSpace(np.array([[0.0, 1.0]]))
    ss = as_sampleset(space, [np.array([[0.4]]), np.array([[0.6]])])
    allocs = [AllocationVector(np.array([1])), AllocationVector(np.array([1]))]
    prev = make_model([(0.0, 1.0)], [[0.5], [0.9]], [[0.01], [0.02]], [0.5, 0.5], 0.1)
    model = mstep_robust(ss, allocs, 2, prev)
    assert model.components[1].mu[0] == 0.9
    assert model.components[1].sigma2[0] == 0.02
    assert model.components[1].pi == 0.0
    assert model.lam == 0.0


def test_mstep_applies_variance_floor():
    space = ParamSpace(np.array([[0.0, 1.0]]))
    ss = as_sampleset(space, [np.array([[0.5]])] * 4)
    allocs = [AllocationVector(np.array([1]))] * 4
    prev = make_model([(0.0, 1.0)], [[0.5]], [[0.01]], [0.5], 0.1)
    model = mstep_robust(ss, allocs, 1, prev, sigma2_floor=1e-10)
    assert model.components[0].sigma2[0] == 1e-10


def test_exact_mstep_maximizes_completed_likelihood():
    """With mean/variance statistics the update should beat any nearby
    parameter choice on the completed negative log-likelihood."""
    space = ParamSpace(np.array([[-50.0, 50.0]]))
    rng = np.random.default_rng(8)
    vals = rng.normal(1.3, 0.8, size=40)
    arrays = [np.array([[v]]) for v in vals]
    allocs = [AllocationVector(np.array([1]))] * 30 + [
        AllocationVector(np.array([2]))
    ] * 10
    ss = as_sampleset(space, arrays)
    prev = make_model([(-50.0, 50.0)], [[0.0]], [[1.0]], [0.5], 0.5)
    fitted = mstep_exact(ss, allocs, 1, prev)
    base = kl_criterion_estimate(ss, allocs, fitted)

    def perturbed(dmu=0.0, fsig=1.0, dpi=0.0, dlam=0.0):
        c = fitted.components[0]
        comp = GaussianComponent(c.mu + dmu, c.sigma2 * fsig, min(1.0, max(1e-6, c.pi + dpi)))
        return ApproxModel(space, [comp], max(0.0, fitted.lam + dlam))

    for kwargs in (
        {"dmu": 0.01}, {"dmu": -0.01},
        {"fsig": 1.03}, {"fsig": 0.97},
        {"dpi": -0.02}, {"dpi": 0.02},
        {"dlam": 0.02}, {"dlam": -0.02},
    ):
        other = kl_criterion_estimate(ss, allocs, perturbed(**kwargs))
        assert base <= other + 1e-9, f"update beaten by perturbation {kwargs}"


# ---------------------------------------------------------------------------
# criterion
# ---------------------------------------------------------------------------


def test_criterion_negates_single_joint_density():
    model = make_model([(0.0, 1.0)], [[0.5]], [[0.01]], [0.8], 0.1)
    space = model.space
    ss = as_sampleset(space, [np.array([[0.5]])])
    allocs = [AllocationVector(np.array([1]))]
    expected = -labeled_joint_log_density(ss.samples[0], allocs[0], model)
    assert kl_criterion_estimate(ss, allocs, model) == pytest.approx(expected, rel=1e-14)


def test_criterion_additive_under_duplication():
    model = make_model([(0.0, 1.0)], [[0.3], [0.7]], [[0.01], [0.04]], [0.7, 0.4], 0.3)
    rng = np.random.default_rng(21)
    raw, labs = sample_batch_from_model(model, 25, rng)
    ss = SampleSet.ingest(model.space, raw)
    allocs = [AllocationVector(l) for l in labs]
    single = kl_criterion_estimate(ss, allocs, model)
    doubled = SampleSet.ingest(model.space, raw + raw)
    assert kl_criterion_estimate(doubled, allocs + allocs, model) == pytest.approx(
        2 * single, rel=1e-13
    )


def test_criterion_signals_zero_density_as_infinity():
    model = make_model([(0.0, 1.0)], [[0.5]], [[0.01]], [1.0], 0.0)
    ss = as_sampleset(model.space, [np.zeros((0, 1))])
    allocs = [AllocationVector(np.array([], dtype=int))]
    assert kl_criterion_estimate(ss, allocs, model) == math.inf


# ---------------------------------------------------------------------------
# full fit
# ---------------------------------------------------------------------------


TRUE_MODEL = None


@pytest.fixture(scope="module")
def recovery_fit():
    true = make_model(
        [(0.0, 1.0)], [[0.3], [0.7]], [[0.0016], [0.0016]], [0.9, 0.5], 0.2
    )
    raw, _ = sample_batch_from_model(true, 20_000, np.random.default_rng(123))
    ss = SampleSet.ingest(true.space, raw)
    result = sem_fit(ss, FitConfig(rng_seed=7))
    return true, ss, result


def test_fit_recovers_generating_parameters(recovery_fit):
    true, _, result = recovery_fit
    model = result.model
    assert model.L == 2
    order = np.argsort(model.mus()[:, 0])
    mus = model.mus()[order, 0]
    pis = model.pis()[order]
    assert abs(mus[0] - 0.3) < 0.02
    assert abs(mus[1] - 0.7) < 0.02
    assert abs(pis[0] - 0.9) < 0.05
    assert abs(pis[1] - 0.5) < 0.05
    assert abs(model.lam - 0.2) < 0.1


def test_fit_parameters_stay_in_range(recovery_fit):
    _, _, result = recovery_fit
    for snap in result.trace.models:
        assert np.all(snap.pis() >= 0.0) and np.all(snap.pis() <= 1.0)
        assert snap.lam >= 0.0


def test_fit_component_count_never_increases(recovery_fit):
    _, _, result = recovery_fit
    Ls = [m.L for m in result.trace.models]
    assert all(a >= b for a, b in zip(Ls, Ls[1:]))


def test_fit_criterion_stabilizes(recovery_fit):
    # the criterion settles almost immediately and then only jitters with
    # the allocation resampling; compare late window means
    _, _, result = recovery_fit
    crit = np.array(recovery_fit[2].trace.criteria)
    assert len(crit) == 100
    early, late = crit[40:60].mean(), crit[80:100].mean()
    assert abs(late - early) / abs(late) < 0.01


def test_fit_final_allocations_are_valid(recovery_fit):
    _, ss, result = recovery_fit
    assert len(result.allocations) == len(ss)
    for x, z in zip(ss.samples, result.allocations):
        assert z.k == x.k
        indicator_from_allocation(z, result.trace.models[-1].L)


def test_fit_is_deterministic_given_seed():
    true = make_model([(0.0, 1.0)], [[0.4], [0.8]], [[0.0025], [0.0025]], [0.8, 0.6], 0.1)
    raw, _ = sample_batch_from_model(true, 1500, np.random.default_rng(5))
    ss = SampleSet.ingest(true.space, raw)
    cfg = FitConfig(iterations=30, averaging_window=10, rng_seed=99)
    a = sem_fit(ss, cfg)
    b = sem_fit(ss, cfg)
    assert a.trace.criteria == b.trace.criteria
    assert np.array_equal(a.model.mus(), b.model.mus())
    assert np.array_equal(a.model.sigma2s(), b.model.sigma2s())
    assert np.array_equal(a.model.pis(), b.model.pis())
    assert a.model.lam == b.model.lam


def test_fit_prunes_starved_component():
    space = ParamSpace(np.array([[0.0, 1.0]]))
    rng = np.random.default_rng(31)
    arrays = [np.array([[v]]) for v in rng.normal(0.5, 0.03, size=295)]
    # five two-point samples whose second point sits in a tight decoy cluster
    for v in rng.normal(0.5, 0.03, size=5):
        arrays.append(np.array([[v], [0.9 + 0.001 * rng.standard_normal()]]))
    ss = SampleSet.ingest(space, arrays)
    cfg = FitConfig(
        iterations=20, averaging_window=10, rng_seed=3,
        init_rule="fixed", fixed_L=2,
    )
    result = sem_fit(ss, cfg)
    assert result.pruned, "expected the 5-sample decoy component to be pruned"
    assert result.model.L == 1
    assert abs(result.model.components[0].mu[0] - 0.5) < 0.02
    Ls = [m.L for m in result.trace.models]
    assert all(a >= b for a, b in zip(Ls, Ls[1:]))


def test_fit_reports_when_all_components_die():
    space = ParamSpace(np.array([[0.0, 1.0]]))
    rng = np.random.default_rng(41)
    arrays = [np.zeros((0, 1))] * 100 + [rng.random((1, 1)) for _ in range(6)]
    ss = SampleSet.ingest(space, arrays)
    cfg = FitConfig(
        iterations=15, averaging_window=5, rng_seed=2,
        init_rule="fixed", fixed_L=1,
    )
    result = sem_fit(ss, cfg)
    assert result.model.L == 0
    assert any("point-process" in n for n in result.notes)
    assert result.model.lam > 0


def test_fit_rejects_empty_input():
    space = ParamSpace(np.array([[0.0, 1.0]]))
    ss = SampleSet(space, [], {})
    with pytest.raises(ModelError):
        sem_fit(ss, FitConfig())


def test_fit_config_validation():
    with pytest.raises(ModelError):
        FitConfig(iterations=10, averaging_window=20)
    with pytest.raises(ModelError):
        FitConfig(prune_threshold=-1)
    with pytest.raises(ModelError):
        FitConfig(init_rule="nope")
