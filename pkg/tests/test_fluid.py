import numpy as np
import pytest

from oppsched.drift import NotErgodicError
from oppsched.fluid import (
    NoSignChangeError,
    fluid_trajectory,
    growth_rates,
    is_max_stable,
    is_stable,
    load_rho,
    stability_threshold,
)
from oppsched.model import ClassParams, SystemConfig
from oppsched.policy import TieBreakRule, cmu_rule, parse_policy, potential_improvement, score_based

from helpers import cdma

CFG = cdma()
ALL_ONES = (1.0, 1.0)


def test_pi_trajectory_breakpoints():
    traj = fluid_trajectory(potential_improvement(), CFG, ALL_ONES)
    assert traj.terminal == "emptied"
    assert traj.breakpoints == pytest.approx([0.0, 1 / 0.26, 12.5 / 0.15], rel=1e-12)
    assert traj.segments[0].U == frozenset()
    assert traj.segments[1].U == frozenset({0})
    np.testing.assert_allclose(traj.value(1 / 0.26), [0.0, 1 + 0.05 / 0.26], atol=1e-12)


def test_sb_random_trajectory_breakpoints():
    traj = fluid_trajectory(score_based(TieBreakRule.random(0.5, 0.5)), CFG, ALL_ONES)
    assert traj.breakpoints == pytest.approx([0.0, 1 / 0.06, 12.5 / 0.15], rel=1e-12)
    # class 2 stays flat on the first segment (drift exactly zero)
    np.testing.assert_allclose(traj.value(10.0)[1], 1.0, atol=1e-12)


def test_all_br_policies_empty_simultaneously():
    # total emptying time (sum x0_k/mu_k)/(1 - rho) is policy independent
    t_final = (1 / 0.4 + 1 / 0.1) / (1 - 0.85)
    for spec in (
        potential_improvement(),
        score_based(TieBreakRule.random(0.5, 0.5)),
        parse_policy("pb"),
        score_based(TieBreakRule.myopic()),
        parse_policy("pb", "myopic"),
        score_based(TieBreakRule.priority(1, 0)),
    ):
        traj = fluid_trajectory(spec, CFG, ALL_ONES)
        assert traj.terminal == "emptied"
        assert traj.emptied_time == pytest.approx(t_final, rel=1e-9)


def test_cmu_trajectory_grows_after_t1():
    traj = fluid_trajectory(cmu_rule(), CFG, ALL_ONES)
    assert traj.terminal == "grows_forever"
    assert traj.breakpoints == pytest.approx([0.0, 1 / 0.26], rel=1e-12)
    assert traj.final_drift[1] > 0


def test_zero_initial_stable_br():
    with pytest.warns(UserWarning, match="zero-initial"):
        traj = fluid_trajectory(potential_improvement(), CFG, (0.0, 0.0))
    assert traj.terminal == "emptied"
    assert traj.emptied_time == 0.0


def test_zero_initial_growing_class():
    cfg = cdma(0.24)
    with pytest.warns(UserWarning, match="zero-initial"):
        traj = fluid_trajectory(potential_improvement(), cfg, (0.0, 0.0))
    assert traj.terminal == "grows_forever"
    # class 1 is held at zero (drift <= 0 after the pre-pass), class 2 grows
    np.testing.assert_allclose(traj.final_drift, [0.0, 0.01], atol=1e-12)


def test_partial_zero_initial():
    with pytest.warns(UserWarning):
        traj = fluid_trajectory(potential_improvement(), CFG, (0.0, 1.0))
    assert traj.terminal == "emptied"
    # only class 2 needs draining: 1 / 0.015 with class 1 already emptied
    assert traj.emptied_time == pytest.approx(1 / 0.015, rel=1e-9)


def test_is_max_stable():
    ok, rho = is_max_stable(CFG)
    assert ok and rho == pytest.approx(0.85)
    ok, rho = is_max_stable(cdma(0.24))
    assert not ok and rho == pytest.approx(1.1)
    cfg0 = cdma(0.0).with_lambda(1, 0.0)
    ok, rho = is_max_stable(cfg0)
    assert ok and rho == 0.0


def test_is_stable_verdicts():
    assert is_stable(score_based(), cdma((0.99 - 0.5) * 0.4)).policy_stable
    rep = is_stable(cmu_rule(), CFG)
    assert not rep.policy_stable and rep.max_stable
    assert rep.method == "fluid_recursion"
    assert is_stable(cmu_rule(), cdma((0.6 - 0.5) * 0.4)).policy_stable
    rep = is_stable(score_based(), CFG)
    assert rep.method == "br_fast_path" and rep.policy_stable


def test_policy_stable_implies_max_stable():
    for lam1 in (0.05, 0.14, 0.2, 0.24):
        for name in ("sb", "pi", "cmu", "rb"):
            rep = is_stable(parse_policy(name), cdma(lam1))
            assert (not rep.policy_stable) or rep.max_stable


def test_threshold_cmu_and_rb():
    # regression pins for the exact product-form computation; the bisection
    # tolerance is 1e-3 in rho
    thr = stability_threshold(cmu_rule(), CFG, 0, 0.004, 0.196)
    assert thr.rho_star == pytest.approx(0.7783, abs=2e-3)
    thr = stability_threshold(parse_policy("rb"), CFG, 0, 0.004, 0.196)
    assert thr.rho_star == pytest.approx(0.8454, abs=2e-3)


def test_threshold_br_exact_one():
    thr = stability_threshold(score_based(), CFG, 0, 0.004, 0.196)
    assert thr.rho_star == 1.0 and thr.exact


def test_threshold_no_sign_change():
    with pytest.raises(NoSignChangeError):
        stability_threshold(cmu_rule(), CFG, 0, 0.004, 0.1)  # stable on whole range
    with pytest.raises(NoSignChangeError):
        stability_threshold(cmu_rule(), CFG, 0, 0.15, 0.196)  # unstable on whole range


def test_growth_rates_overload_table():
    cfg = cdma(0.24)
    np.testing.assert_allclose(growth_rates(parse_policy("sb"), cfg), [0.04, 0.0], atol=1e-12)
    np.testing.assert_allclose(growth_rates(parse_policy("pb"), cfg), [0.04, 0.0], atol=1e-12)
    np.testing.assert_allclose(growth_rates(potential_improvement(), cfg), [0.0, 0.01], atol=1e-12)
    assert growth_rates(cmu_rule(), cfg)[1] == pytest.approx(0.036, abs=0.002)
    assert growth_rates(parse_policy("rb"), cfg)[1] == pytest.approx(0.029, abs=0.002)


def test_growth_rates_stable_zero():
    np.testing.assert_allclose(growth_rates(score_based(), CFG), [0.0, 0.0])


def test_brp_growth_rate_minimal_in_overload():
    cfg = cdma(0.24)
    cost = np.array([cp.cost for cp in cfg.classes])
    rates = {
        name: float(growth_rates(parse_policy(name), cfg) @ cost)
        for name in ("pi", "sb", "pb", "rb", "cmu")
    }
    assert all(rates["pi"] <= v + 1e-12 for v in rates.values())


def test_total_drift_monotone_in_alpha():
    # stage-0 total drift under a two-class best-rate tie weight alpha
    prev = None
    from oppsched.drift import averaged_drift

    for alpha in np.linspace(0.0, 1.0, 11):
        spec = score_based(TieBreakRule.random(alpha, 1 - alpha))
        d = averaged_drift(spec, CFG, ()).delta.sum()
        if prev is not None:
            assert d <= prev + 1e-12
        prev = d


def test_three_class_priority_cascade():
    cfg = SystemConfig(
        classes=(
            ClassParams(lam=0.1, q=(0.5, 0.5), mu=(0.2, 0.5)),
            ClassParams(lam=0.06, q=(0.5, 0.5), mu=(0.1, 0.3)),
            ClassParams(lam=0.02, q=(1.0,), mu=(0.2,)),
        )
    )
    spec = parse_policy("pb", "myopic")  # best indices all 1, myopic order by mu_best
    rho = load_rho(cfg)
    assert rho == pytest.approx(0.1 / 0.5 + 0.06 / 0.3 + 0.02 / 0.2)
    traj = fluid_trajectory(spec, cfg, (1.0, 1.0, 1.0))
    assert traj.terminal == "emptied"
    assert [sorted(s.U) for s in traj.segments] == [[], [0], [0, 1]]
    t_final = (1 / 0.5 + 1 / 0.3 + 1 / 0.2) / (1 - rho)
    assert traj.emptied_time == pytest.approx(t_final, rel=1e-9)


def test_fluid_with_poisson_arrivals_uses_grid_solver():
    # the 1-d product form requires Bernoulli arrivals; Poisson routes the
    # numeric stage to the truncated-grid kernel
    import dataclasses

    cfg = dataclasses.replace(cdma(0.06), arrival_kind="poisson")
    traj = fluid_trajectory(cmu_rule(), cfg, (1.0, 1.0))
    assert traj.segments[1].method == "truncated_solve"
    assert traj.terminal == "emptied"


def test_nonergodic_error_surfaces():
    # a stage whose saturated chain cannot be stationary raises rather than
    # extrapolating: overloaded class 1 under the even random tie
    cfg = cdma(0.24)
    spec = score_based(TieBreakRule.random(0.5, 0.5))
    with pytest.raises(NotErgodicError):
        from oppsched.drift import averaged_drift

        averaged_drift(spec, cfg, (0,))
