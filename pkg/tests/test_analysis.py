import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poslc import analysis as A
from poslc.analysis import BoundParams, DomainError
from poslc.lottery import Execution, ProtocolParams, constants_for, sample_counts

executions = st.text(alphabet="UAE", min_size=1, max_size=40).map(Execution.from_classes)


def attack_params(**kw):
    base = dict(rho=0.06, beta=0.33, lottery_mode="poisson")
    base.update(kw)
    return ProtocolParams(**base)


# -- pivots ------------------------------------------------------------------


def test_pivot_examples():
    ex = Execution.from_classes("UUAUU")
    assert [A.check_pivot(ex, t) for t in range(1, 6)] == [True, False, False, False, True]
    assert [A.naive_check_pivot(ex, t) for t in range(1, 6)] == [True, False, False, False, True]
    all_u = Execution.from_classes("U" * 12)
    assert A.pivot_mask(all_u)[1:].all()
    covered = Execution.from_classes("UAAAU")
    assert not A.check_pivot(covered, 3)
    with pytest.raises(IndexError):
        A.check_pivot(ex, 0)


def test_freq_pivots_examples():
    one = Execution.from_classes("AAUAA")
    one_piv = Execution.from_classes("EEUEE")
    assert A.check_freq_pivots(one_piv, 5)
    assert A.unique_pivots(one).size == 0
    assert not A.check_freq_pivots(Execution.from_classes("AAAA"), 3)
    assert A.min_pivot_gap(Execution.from_classes("AAAA")) == 5
    with pytest.raises(ValueError):
        A.check_freq_pivots(one, 0)


# -- ShortPrefixes -------------------------------------------------------------


def test_short_prefix_examples():
    uaa = Execution.from_classes("UAA")
    assert [A.check_short_prefixes(uaa, k) for k in (1, 2, 3, 4)] == [False, False, True, True]
    # Genesis anchors the adversarial run before the first unique slot.
    no_unique = Execution.from_classes("AAEAA")
    assert [A.check_short_prefixes(no_unique, k) for k in (4, 5)] == [False, True]
    assert A.naive_short_prefix_max(no_unique) == 4
    assert A.check_short_prefixes(Execution.from_classes("EEEE"), 1)
    assert A.check_short_prefixes(Execution.from_classes("UUUU"), 1)
    with pytest.raises(ValueError):
        A.check_short_prefixes(uaa, 0)


# -- W and FewLongChains --------------------------------------------------------


def test_w_examples():
    ex = Execution.from_classes("UAAU")
    assert A.compute_w(ex, 3, 3) == 2 == A.naive_compute_w(ex, 3, 3)
    quiet = Execution.from_classes("UEUUE")
    assert all(A.compute_w(quiet, s, t) == 0 for t in range(6) for s in range(t + 1))
    assert A.check_few_long_chains(quiet, 1)
    with pytest.raises(IndexError):
        A.compute_w(ex, 3, 2)


@settings(max_examples=200)
@given(executions, st.data())
def test_w_monotone_in_s(ex, data):
    t = data.draw(st.integers(0, ex.horizon))
    s = data.draw(st.integers(0, t))
    assert A.compute_w(ex, s, t) <= A.compute_w(ex, t, t)


@settings(max_examples=300)
@given(executions)
def test_production_matches_naive(ex):
    T = ex.horizon
    mask = A.pivot_mask(ex)
    assert [bool(mask[t]) for t in range(1, T + 1)] == [A.naive_check_pivot(ex, t) for t in range(1, T + 1)]
    for g in (1, 3, T):
        assert A.check_freq_pivots(ex, g) == A.naive_check_freq_pivots(ex, g)
    assert int(A.short_prefix_profile(ex).max()) == A.naive_short_prefix_max(ex)
    assert int(A.few_long_chains_profile(ex).max()) == A.naive_few_long_chains_max(ex)


@settings(max_examples=100)
@given(executions)
def test_gap_is_the_threshold_gamma(ex):
    g = A.min_pivot_gap(ex)
    if g > 1:
        assert not A.naive_check_freq_pivots(ex, g - 1)
    if g <= ex.horizon:
        assert A.naive_check_freq_pivots(ex, g)


# -- bounds --------------------------------------------------------------------


def _oracle_short_prefixes(rho, beta, eps1, eps2, window, t_h):
    mp.mp.dps = 30
    p = 1 - mp.e ** (-rho)
    pu = (1 - beta) * rho * mp.e ** (-rho)
    pa = p - pu
    a2 = min(mp.mpf(eps1) ** 2 / 36, mp.mpf(eps2) ** 2 / (eps2 + 2) * pa / p)
    return float(min(1, 2 * mp.mpf(t_h) ** 2 * mp.e ** (-a2 * p * window)))


@pytest.mark.parametrize("window", [5000, 200_000, 400_000])
def test_short_prefix_bound_matches_oracle(window):
    params = ProtocolParams(rho=0.05, beta=0.25, horizon=100_000, lottery_mode="poisson")
    eps1 = A.epsilon1_for(0.05, 0.25)
    got = A.bound_short_prefixes(params, BoundParams(epsilon1=eps1, epsilon2=1.0, t_window=window))
    want = _oracle_short_prefixes(0.05, 0.25, eps1, 1.0, window, 100_000)
    assert got == pytest.approx(want, rel=1e-9, abs=1e-300)


def test_bounds_decay_with_window():
    params = ProtocolParams(rho=0.05, beta=0.25, horizon=1000, lottery_mode="poisson")
    vals = [A.bound_short_prefixes(params, BoundParams(epsilon1=0.4, t_window=w)) for w in (1e3, 1e5, 1e6, 1e7)]
    assert vals == sorted(vals, reverse=True) and vals[-1] == 0.0
    flc = [A.bound_few_long_chains(params, BoundParams(epsilon1=0.4, t_window=w)) for w in (1e2, 1e4, 1e6)]
    assert flc == sorted(flc, reverse=True) and flc[-1] < 1e-10


def test_alpha3_readings():
    params = attack_params()
    bp = BoundParams(epsilon1=0.3)
    both = A.bound_few_long_chains_both(params, bp)
    assert set(both) == {"max", "min"}
    assert A.alpha3(params, bp, "max") >= A.alpha3(params, bp, "min")
    assert both["max"] <= both["min"]
    with pytest.raises(ValueError):
        A.alpha3(params, bp, "median")


def test_freq_pivot_bound_internals():
    params = ProtocolParams(rho=0.3541992622891347, beta=0.1, horizon=2000, lottery_mode="poisson")
    piv = A.bound_freq_pivots(params, BoundParams(epsilon1=0.5))
    x = 0.5**2 / 36 * constants_for(params.rho, 0.1).p
    e = math.exp(-x)
    assert piv.v == math.ceil(math.log(4 * (1 + e) / (1 - e) ** 2) / x)
    assert piv.w == max(math.ceil(2 * math.log(math.sqrt(2) * 2000) / x), 2 * piv.v + 1)
    assert piv.log_p1 == pytest.approx(math.log(0.5) + (2 * piv.v - 1) * math.log(1 - constants_for(params.rho, 0.1).p_a))
    # Closed-form gamma overflows a float at this scale and the bound is vacuous.
    assert piv.gamma == math.inf and piv.bound == 1.0
    small = A.bound_freq_pivots(params, BoundParams(epsilon1=0.5, gamma=323))
    assert small.gamma == 323 and small.bound == 1.0


@pytest.mark.parametrize("kw", [{"epsilon1": 0.0}, {"epsilon1": 1.0}, {"epsilon2": -1}, {"kappa": -1},
                                {"t_window": 0}, {"gamma": 0}, {"epsilon3": math.nan}])
def test_bound_params_domain(kw):
    with pytest.raises(DomainError):
        BoundParams(**kw)


# -- security condition ----------------------------------------------------------------

# High-precision roots from an independent findroot at 40 digits.
ROOTS = {
    (1 / 3, 0.1): 0.3731535867671795450963466431087525511269,
    (0.1, 0.5): 0.3541992622891345953159340753446258707681,
    (0.25, 0.2): 0.4308422097842590367678406745433500325966,
}


@pytest.mark.parametrize("beta,eps1", list(ROOTS))
def test_solve_rho_frozen_roots(beta, eps1):
    rho = A.solve_rho(beta, eps1)
    assert rho == pytest.approx(ROOTS[(beta, eps1)], rel=1e-14)
    assert abs(A.security_residual(rho, beta, eps1)) < 1e-12


def test_solve_rho_none_and_domain():
    assert A.solve_rho(1 / 3, 0.4) is None
    assert A.solve_rho(0.25, 0.5) is None
    with pytest.raises(DomainError):
        A.solve_rho(0.5, 0.1)
    with pytest.raises(DomainError):
        A.solve_rho(0.1, 1.0)


def test_solve_rho_boundary_goes_to_zero():
    rhos = [A.solve_rho(0.25, 0.5 - d) for d in (1e-1, 1e-2, 1e-3, 1e-4)]
    assert rhos == sorted(rhos, reverse=True) and rhos[-1] < 1e-3


@settings(max_examples=100)
@given(st.floats(0.0, 0.49), st.floats(0.01, 0.99))
def test_solve_rho_residual_and_slack(beta, eps1):
    rho = A.solve_rho(beta, eps1)
    if eps1 >= 1 - 2 * beta:
        assert rho is None
        return
    assert rho is not None and rho > 0
    assert abs(A.security_residual(rho, beta, eps1)) < 1e-12
    assert A.epsilon1_for(rho, beta) == pytest.approx(eps1, abs=1e-9)


# -- throughput ------------------------------------------------------------------------


def test_throughput_at_attack_parameters():
    tb = A.throughput_bounds(attack_params(budget_k=20))
    assert tb.theta == pytest.approx(0.017482402084422297, rel=1e-12)
    assert abs(tb.theta - 0.0174815) < 1e-6
    assert tb.phi_p == pytest.approx(0.05823546641575128, rel=1e-12)
    assert tb.phi_idle == pytest.approx(0.6122420536909469, rel=1e-12)
    assert A.throughput_bounds(attack_params(), m=1).tp_m == tb.theta
    assert A.throughput_bounds(attack_params(), m=5).tp_m == pytest.approx(5 * tb.theta)
    eps1 = tb.theta / tb.phi_p
    assert tb.floor == pytest.approx((1 - tb.phi_p) * eps1 / 2 * 20)
    with pytest.raises(ValueError):
        A.throughput_bounds(attack_params(), m=0)


def test_theta_vanishes_with_slack():
    beta = 0.2
    rho = A.solve_rho(beta, 1 - 2 * beta - 1e-6)
    assert A.throughput_bounds(ProtocolParams(rho=rho, beta=beta, lottery_mode="poisson")).theta < 1e-6


@settings(max_examples=100)
@given(st.floats(0.0, 0.45), st.floats(0.05, 0.95))
def test_idle_fraction_floor_under_security_condition(beta, eps1):
    rho = A.solve_rho(beta, eps1)
    if rho is None:
        return
    tb = A.throughput_bounds(ProtocolParams(rho=rho, beta=beta, lottery_mode="poisson"))
    assert tb.phi_idle >= (1 - tb.phi_p) / 2 - 1e-12
    assert tb.theta == pytest.approx(tb.phi_p * eps1, rel=1e-6)


# -- planning --------------------------------------------------------------------------


def test_windows_invert_budgets():
    params = attack_params()
    t = A.short_prefixes_window(params, 40, 1.0)
    assert A.short_prefixes_k(params, BoundParams(epsilon1=0.3, t_window=t)) == 40
    tb = A.few_long_chains_window(params, 40, 1.0, 0.5)
    assert A.few_long_chains_k(params, BoundParams(epsilon1=0.3, t_window=tb)) == 40
    assert A.few_long_chains_window(attack_params(beta=0.0), 40, 1.0, 0.5) > 0


def test_solve_params_report():
    out = A.solve_params(0.25, 0.2, 20, 1000)
    assert abs(out["residual"]) < 1e-12
    for key in ("p", "p_u", "p_a", "alpha1_prime", "alpha2", "alpha3_max", "alpha3_min", "w", "v",
                "gamma", "t_conf", "t_live", "bound_short_prefixes", "bound_freq_pivots"):
        assert key in out
    assert out["rho"] == pytest.approx(ROOTS[(0.25, 0.2)], rel=1e-14)
    with pytest.raises(DomainError):
        A.solve_params(0.25, 0.6, 20, 1000)


def test_t_conf_grows_with_kappa():
    lo = A.solve_params(0.0, 0.9, 20, 2000, kappa=0.0)
    hi = A.solve_params(0.0, 0.9, 20, 2000, kappa=5.0)
    assert hi["log_gamma"] > lo["log_gamma"]
    assert hi["t_conf"] > lo["t_conf"]


def test_desk_profile_is_deterministic_and_consistent():
    a = A.desk_profile(0.3541992622891347, 0.1, 500, samples=20, seed=3)
    b = A.desk_profile(0.3541992622891347, 0.1, 500, samples=20, seed=3)
    assert a == b
    assert a.gamma >= a.gap_max and a.t_live == 2 * a.gamma
    assert a.k_freshest > a.short_prefix_max and a.k_equivocation > a.few_long_chains_max
    params = ProtocolParams(rho=0.3541992622891347, beta=0.1, horizon=500, lottery_mode="poisson")
    rng = np.random.default_rng(np.random.SeedSequence(3, spawn_key=(99,)))
    execs = [sample_counts(params, rng) for _ in range(20)]
    assert all(A.check_short_prefixes(ex, a.k_freshest) for ex in execs)
    assert all(A.check_freq_pivots(ex, a.gamma) for ex in execs)
