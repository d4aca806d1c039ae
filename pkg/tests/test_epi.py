import numpy as np
import pytest

from diffabm import tape as T
from diffabm.epi import (
    EpiParams,
    MeanFieldDisease,
    PendingResult,
    StimulusEvent,
    StimulusSchedule,
    TestProtocol,
    VaccineProtocol,
    apply_isolation,
    beta_from_r0,
    draw_dropout_mask,
    efficacy_in_force,
    exposure_probabilities,
    exposure_step,
    infection_probability,
    seed_initial_infections,
    seirm_progress,
    stimulus_step,
    susceptibility_vector,
    vaccination_step,
)
from diffabm.epi import test_results as measure_test_results
from diffabm.epi import testing_step as run_testing_step
from diffabm.errors import DomainError
from diffabm.popgen import ContactGraph, GraphConfig, Population, Stage, build_contact_graph
from diffabm.rng import Channel, stream
from diffabm.tape import Param, Tape


def make_pop(n, bins=None, household_size=1):
    bins = bins or {
        "age_band": ["young", "old"],
        "gender": ["female", "male"],
        "borough": ["b0"],
        "income_band": ["low", "high"],
        "occupation": ["occ0"],
    }
    rng = np.random.default_rng(0)
    return Population(
        age_band=rng.integers(0, len(bins["age_band"]), n).astype(np.int32),
        gender=rng.integers(0, len(bins["gender"]), n).astype(np.int32),
        borough=np.zeros(n, dtype=np.int32),
        income_band=rng.integers(0, len(bins["income_band"]), n).astype(np.int32),
        occupation=np.zeros(n, dtype=np.int32),
        household_id=(np.arange(n) // household_size).astype(np.int64),
        bins=bins,
    )


def complete_graph(n):
    import scipy.sparse as sp

    a = np.ones((n, n)) - np.eye(n)
    return ContactGraph(
        layers={"mobility": sp.csr_matrix(a)}, layer_weights={"mobility": 1.0}
    )


def default_params(**kw):
    base = dict(
        beta=0.5,
        susceptibility=np.array([1.0, 1.0]),
        mortality_prob=np.array([0.0, 0.0]),
        latent_period=2,
        infectious_period=3,
        dt=1.0,
    )
    base.update(kw)
    return EpiParams(**base)


def test_infection_kernel_closed_form():
    p = infection_probability(2.0, 1.0, 4.0, 2.0, dt=1.0)
    assert abs(float(np.asarray(p)) - (1.0 - np.exp(-1.0))) < 1e-12


def test_infection_kernel_zero_beta_exact():
    assert float(np.asarray(infection_probability(0.0, 1.0, 4.0, 2.0))) == 0.0


def test_infection_kernel_no_infected_neighbors():
    assert float(np.asarray(infection_probability(2.0, 1.0, 4.0, 0.0))) == 0.0


def test_infection_kernel_isolated_vertex():
    assert float(np.asarray(infection_probability(2.0, 1.0, 0.0, 0.0))) == 0.0
    with pytest.raises(DomainError):
        infection_probability(2.0, 1.0, 0.0, 1.0)


def test_infection_kernel_gradient_in_beta():
    beta = Param("beta", 2.0, bounds=(0.0, 10.0))
    tape = Tape()
    b = tape.watch(beta)
    p = infection_probability(b, 1.0, 4.0, 2.0)
    grads = tape.backward(p)
    # dp/dbeta = c * exp(-beta c) with c = 0.5
    assert grads[beta] == pytest.approx(0.5 * np.exp(-1.0), rel=1e-12)


def test_apply_isolation():
    inf = np.array([1.0, 1.0, 0.0])
    assert np.all(np.asarray(apply_isolation(inf, np.ones(3))) == 0.0)
    np.testing.assert_array_equal(np.asarray(apply_isolation(inf, np.zeros(3))), inf)
    out = apply_isolation(np.array([0.6]), np.array([0.5]))
    assert float(np.asarray(out)[0]) == pytest.approx(0.3)
    with pytest.raises(DomainError):
        apply_isolation(np.ones(3), np.ones(2))


def test_beta_from_r0():
    assert float(np.asarray(beta_from_r0(3.5, 7))) == pytest.approx(0.5)
    assert float(np.asarray(beta_from_r0(3.2, 8, dt=0.5))) == pytest.approx(0.8)


def test_exposure_complete_graph_probability_and_mc_mean():
    n = 11
    graph = complete_graph(n)
    params = default_params(beta=0.5, latent_period=1, infectious_period=3)
    pop = make_pop(n)
    pop.disease_stage[0] = Stage.I
    pop.stage_timer[0] = 3
    eff_inf = (pop.disease_stage == Stage.I).astype(float)
    susc = susceptibility_vector(params, pop.age_band)
    p = exposure_probabilities(
        graph, params, 0.5, susc, eff_inf, np.zeros(n)
    )
    expected_p = 1.0 - np.exp(-0.05)
    np.testing.assert_allclose(np.asarray(p)[1:], expected_p, rtol=1e-12)

    runs = 10_000
    total = 0
    for k in range(runs):
        trial = make_pop(n)
        trial.disease_stage[0] = Stage.I
        trial.stage_timer[0] = 3
        new_e = exposure_step(
            graph, trial, params, 0.5, eff_inf, np.zeros(n),
            stream(99, Channel.EXPOSURE, step=k),
        )
        total += new_e.sum()
    mean = total / runs
    expect = 10 * expected_p
    sigma = np.sqrt(10 * expected_p * (1 - expected_p) / runs)
    assert abs(mean - expect) < 3 * sigma


def test_exposure_none_without_infectious():
    n = 20
    graph = complete_graph(n)
    params = default_params()
    pop = make_pop(n)
    new_e = exposure_step(
        graph, pop, params, 0.5, np.zeros(n), np.zeros(n), stream(1, Channel.EXPOSURE)
    )
    assert not new_e.any()


def test_exposure_blocked_by_full_efficacy():
    n = 20
    graph = complete_graph(n)
    params = default_params(beta=50.0)
    pop = make_pop(n)
    pop.disease_stage[0] = Stage.I
    eff_inf = (pop.disease_stage == Stage.I).astype(float)
    new_e = exposure_step(
        graph, pop, params, 50.0, eff_inf, np.ones(n), stream(1, Channel.EXPOSURE)
    )
    assert not new_e.any()


def test_progress_e_to_i_deterministic():
    pop = make_pop(3)
    params = default_params(latent_period=1)
    pop.disease_stage[1] = Stage.E
    pop.stage_timer[1] = 1
    out = seirm_progress(pop, params, stream(1, Channel.PROGRESSION))
    assert pop.disease_stage[1] == Stage.I
    assert pop.stage_timer[1] == params.infectious_period
    assert out["to_infectious"][1]


def test_progress_zero_mortality_never_dies():
    pop = make_pop(100)
    params = default_params(infectious_period=1)
    pop.disease_stage[:] = Stage.I
    pop.stage_timer[:] = 1
    for t in range(3):
        seirm_progress(pop, params, stream(1, Channel.PROGRESSION, step=t))
    assert not np.any(pop.disease_stage == Stage.M)
    assert np.all(pop.disease_stage == Stage.R)


def test_progress_mortality_three_sigma():
    n = 10_000
    pop = make_pop(n)
    params = default_params(
        mortality_prob=np.array([0.1, 0.1]), infectious_period=1
    )
    pop.disease_stage[:] = Stage.I
    pop.stage_timer[:] = 1
    out = seirm_progress(pop, params, stream(7, Channel.PROGRESSION))
    deaths = out["died"].size
    assert abs(deaths - 1000) < 3 * np.sqrt(n * 0.1 * 0.9)


def test_progress_skips_agents_exposed_this_step():
    pop = make_pop(2)
    params = default_params(latent_period=1)
    pop.disease_stage[0] = Stage.E
    pop.stage_timer[0] = 1
    skip = np.array([True, False])
    seirm_progress(pop, params, stream(1, Channel.PROGRESSION), skip=skip)
    assert pop.disease_stage[0] == Stage.E
    assert pop.stage_timer[0] == 1


def test_conservation_and_monotone_absorbing_stochastic():
    n = 300
    graph = complete_graph(n)
    params = default_params(
        beta=0.8, mortality_prob=np.array([0.05, 0.1]),
        latent_period=2, infectious_period=3,
    )
    pop = make_pop(n)
    seed_initial_infections(pop, 0.05, stream(3, Channel.INIT), params.infectious_period)
    prev_r, prev_m = 0, 0
    for t in range(40):
        eff_inf = (pop.disease_stage == Stage.I).astype(float)
        new_e = exposure_step(
            graph, pop, params, 0.8, eff_inf, np.zeros(n),
            stream(3, Channel.EXPOSURE, step=t),
        )
        seirm_progress(pop, params, stream(3, Channel.PROGRESSION, step=t), skip=new_e)
        counts = pop.stage_counts()
        assert counts.sum() == n
        assert counts[Stage.R] >= prev_r and counts[Stage.M] >= prev_m
        prev_r, prev_m = counts[Stage.R], counts[Stage.M]
    assert pop.stage_counts()[Stage.R] + pop.stage_counts()[Stage.M] > 0


def two_cohort_sir_oracle(n, k, beta, d_inf, steps):
    """Scalar recursion for a complete graph with k seeded agents, latent=0.

    Seeded agents start with probability-1 infectious mass; the other n-k
    agents are exchangeable, so one scalar per quantity suffices.
    """
    s_b = 1.0
    queue_a = [0.0] * d_inf
    queue_b = [0.0] * d_inf
    queue_a[-1] = 1.0
    new_per_step = []
    for _ in range(steps):
        i_a = sum(queue_a)
        i_b = sum(queue_b)
        visible_b = k * i_a + (n - k - 1) * i_b
        p_b = 1.0 - np.exp(-beta * visible_b / (n - 1))
        new_b = s_b * p_b
        s_b -= new_b
        queue_a = queue_a[1:] + [0.0]
        queue_b = queue_b[1:] + [new_b]
        new_per_step.append((n - k) * new_b)
    return np.array(new_per_step)


def test_mean_field_matches_sir_recursion_oracle():
    n, k, beta, d_inf, steps = 200, 4, 0.9, 3, 30
    graph = complete_graph(n)
    params = default_params(
        beta=beta, latent_period=0, infectious_period=d_inf,
        mortality_prob=np.array([0.0, 0.0]),
    )
    pop = make_pop(n)
    seed = np.zeros(n)
    seed[:k] = 1.0
    mf = MeanFieldDisease(n, params, seed, params.mortality_prob[pop.age_band])
    susc = susceptibility_vector(params, pop.age_band)
    got = []
    for _ in range(steps):
        p = exposure_probabilities(
            graph, params, beta, susc, mf.infectious_mass(), np.zeros(n)
        )
        out = mf.step(p)
        got.append(float(np.sum(np.asarray(out["new_infections"]))))
    want = two_cohort_sir_oracle(n, k, beta, d_inf, steps)
    np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-9)


def test_mean_field_occupancies_sum_to_one():
    n = 50
    graph = complete_graph(n)
    params = default_params(mortality_prob=np.array([0.2, 0.3]))
    pop = make_pop(n)
    seed = np.zeros(n)
    seed[:3] = 1.0
    mf = MeanFieldDisease(n, params, seed, params.mortality_prob[pop.age_band])
    susc = susceptibility_vector(params, pop.age_band)
    for _ in range(40):
        p = exposure_probabilities(
            graph, params, 0.5, susc, mf.infectious_mass(), np.zeros(n)
        )
        mf.step(p)
        np.testing.assert_allclose(mf.occupancy_sums(), 1.0, atol=1e-9)


def test_vaccination_supply_zero_noop():
    pop = make_pop(10)
    protocol = VaccineProtocol(daily_supply=0)
    assert vaccination_step(pop, protocol, 0, stream(1, Channel.VACCINE)) == 0
    assert np.all(pop.doses_received == 0)


def test_vaccination_dose_gap_21():
    pop = make_pop(1)
    protocol = VaccineProtocol(dose_gap=21, daily_supply=1)
    for step in range(40):
        vaccination_step(pop, protocol, step, stream(1, Channel.VACCINE, step=step))
        if step < 21:
            assert pop.doses_received[0] == 1, step
    assert pop.doses_received[0] == 2
    assert pop.last_dose_step[0] == 21


def test_vaccination_dropout_total():
    pop = make_pop(5)
    protocol = VaccineProtocol(dose_gap=2, daily_supply=5, second_dose_dropout=1.0)
    dropout = draw_dropout_mask(pop, protocol, stream(1, Channel.VACCINE))
    assert dropout.all()
    for step in range(10):
        vaccination_step(pop, protocol, step, stream(1, Channel.VACCINE), dropout)
    assert np.all(pop.doses_received == 1)


def test_vaccination_second_doses_take_priority():
    pop = make_pop(4)
    protocol = VaccineProtocol(dose_gap=1, daily_supply=2)
    vaccination_step(pop, protocol, 0, stream(1, Channel.VACCINE))  # agents 0,1 dose 1
    vaccination_step(pop, protocol, 1, stream(1, Channel.VACCINE))
    # at step 1 agents 0,1 are due dose 2 and consume the whole supply
    np.testing.assert_array_equal(pop.doses_received, [2, 2, 0, 0])


def test_efficacy_in_force_levels():
    pop = make_pop(3)
    pop.doses_received[:] = [0, 1, 2]
    protocol = VaccineProtocol(first_dose_efficacy=0.4, second_dose_efficacy=0.9)
    np.testing.assert_allclose(efficacy_in_force(pop, protocol), [0.0, 0.4, 0.9])


def test_test_results_perfect():
    protocol = TestProtocol(specificity=1.0, sensitivity=1.0, result_delay=0)
    truth = np.array([True, False, True, False])
    out = measure_test_results(truth, protocol, stream(1, Channel.TEST))
    np.testing.assert_array_equal(out, truth)


def test_test_results_specificity_three_sigma():
    n = 10_000
    protocol = TestProtocol(specificity=0.65, sensitivity=1.0)
    out = measure_test_results(np.zeros(n, dtype=bool), protocol, stream(5, Channel.TEST))
    false_pos = out.sum()
    assert abs(false_pos - 3500) < 3 * np.sqrt(n * 0.35 * 0.65)


def test_testing_step_delay_and_forced_isolation():
    pop = make_pop(6)
    protocol = TestProtocol(specificity=1.0, sensitivity=1.0, result_delay=2)
    pending = []
    forced = np.full(6, -1, dtype=np.int64)
    newly = np.zeros(6, dtype=bool)
    newly[2] = True
    run_testing_step(pop, protocol, 3, newly, pending, forced,
                 stream(1, Channel.TEST), infectious_period=4)
    assert forced[2] == -1  # result not yet delivered
    run_testing_step(pop, protocol, 4, np.zeros(6, bool), pending, forced,
                 stream(1, Channel.TEST), infectious_period=4)
    assert forced[2] == -1
    run_testing_step(pop, protocol, 5, np.zeros(6, bool), pending, forced,
                 stream(1, Channel.TEST), infectious_period=4)
    assert forced[2] == 5 + 4


def family_population():
    bins = {
        "age_band": ["0t9", "20t29"],
        "gender": ["female", "male"],
        "borough": ["b0"],
        "income_band": ["low", "high"],
        "occupation": ["occ0"],
    }
    # household 0: adult + 2 children; household 1: adult only
    return Population(
        age_band=np.array([1, 0, 0, 1], dtype=np.int32),
        gender=np.zeros(4, dtype=np.int32),
        borough=np.zeros(4, dtype=np.int32),
        income_band=np.array([0, 0, 0, 1], dtype=np.int32),
        occupation=np.zeros(4, dtype=np.int32),
        household_id=np.array([0, 0, 0, 1], dtype=np.int64),
        bins=bins,
    )


def test_stimulus_non_event_step_zero():
    pop = family_population()
    schedule = StimulusSchedule(
        events=[StimulusEvent(step=10, adult_amount=600, per_child_amount=600)],
        child_age_bands=["0t9"],
    )
    assert np.all(stimulus_step(pop, schedule, 5) == 0)


def test_stimulus_adult_with_two_children_gets_1800():
    pop = family_population()
    schedule = StimulusSchedule(
        events=[StimulusEvent(step=10, adult_amount=600, per_child_amount=600)],
        child_age_bands=["0t9"],
    )
    payments = stimulus_step(pop, schedule, 10)
    assert payments[0] == 1800.0
    assert payments[1] == 0.0 and payments[2] == 0.0  # children get nothing
    assert payments[3] == 600.0


def test_stimulus_income_eligibility():
    pop = family_population()
    schedule = StimulusSchedule(
        events=[
            StimulusEvent(
                step=10, adult_amount=600, per_child_amount=600,
                eligible_income_bands=["low"],
            )
        ],
        child_age_bands=["0t9"],
    )
    payments = stimulus_step(pop, schedule, 10)
    assert payments[0] == 1800.0
    assert payments[3] == 0.0  # high income band excluded


def test_stimulus_context_payment_window():
    schedule = StimulusSchedule(
        events=[StimulusEvent(step=30, adult_amount=600, per_child_amount=600)],
        child_age_bands=[],
    )
    assert schedule.context_payment(29) == 0.0
    assert schedule.context_payment(30) == 600.0
    assert schedule.context_payment(59) == 600.0
    assert schedule.context_payment(60) == 0.0


def test_params_validation():
    with pytest.raises(DomainError):
        default_params(infectious_period=0)
    with pytest.raises(DomainError):
        default_params(latent_period=-1)
    with pytest.raises(DomainError):
        default_params(mortality_prob=np.array([1.5, 0.0]))
    default_params(latent_period=0)  # SIR-reducible setting is allowed
