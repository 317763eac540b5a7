"""Execution predicates, closed-form failure bounds and throughput formulas.

Every predicate has a production implementation (prefix sums plus record
searches, roughly O(T log T)) and a ``naive_*`` twin that enumerates the
definition directly. Interval notation: ``(r, s]`` is slots ``r+1..s``.
"""

from __future__ import annotations

import math
from bisect import bisect_left
from dataclasses import dataclass

import numpy as np

from .engine import Trace
from .engine import check_maxdl as _trace_maxdl
from .lottery import DerivedConstants, Execution, ProtocolParams, SlotClass, constants_for, sample_counts

RHO_MAX = 50.0


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class BoundParams:
    epsilon1: float = 0.5
    epsilon2: float = 1.0
    epsilon3: float = 0.5
    epsilon4: float = 0.1
    epsilon5: float = 0.1
    epsilon6: float = 0.1
    epsilon7: float = 0.1
    kappa: float = 0.0
    t_window: int = 100
    gamma: int | None = None

    def __post_init__(self) -> None:
        vals = [getattr(self, f"epsilon{i}") for i in range(1, 8)] + [self.kappa, self.t_window]
        if not all(math.isfinite(v) for v in vals):
            raise DomainError("bound parameters must be finite")
        if not 0.0 < self.epsilon1 < 1.0:
            raise DomainError(f"epsilon1 must lie in (0, 1), got {self.epsilon1}")
        if min(vals[1:7]) <= 0 or self.t_window <= 0:
            raise DomainError("epsilon2..epsilon7 and t_window must be positive")
        if self.kappa < 0:
            raise DomainError("kappa must be non-negative")
        if self.gamma is not None and self.gamma < 1:
            raise DomainError("gamma must be at least 1")


# -- shared prefix machinery ----------------------------------------------


def _prefix(exec_: Execution) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(classes padded so index t is slot t, U_c, N_c, D = U_c - N_c)."""
    u, n = exec_.cumulative()
    cls = np.concatenate(([SlotClass.EMPTY], exec_.classes())).astype(np.int8)
    return cls, u, n, u - n


class _Records:
    """Earliest uniquely successful slot r with D(r) >= x, restricted to r < bound.

    Slot 0 (genesis, downloaded by everyone) counts as uniquely successful.
    Records are the unique slots whose D beats every earlier unique slot, so
    both their positions and D values increase; the earliest qualifying slot
    for a threshold is the first record reaching it.
    """

    def __init__(self, cls: np.ndarray, d: np.ndarray):
        self.slots: list[int] = [0]
        self.values: list[int] = [int(d[0])]
        for r in np.flatnonzero(cls == SlotClass.UNIQUE):
            v = int(d[r])
            if not self.values or v > self.values[-1]:
                self.slots.append(int(r))
                self.values.append(v)

    def earliest(self, x: int, bound: int) -> int | None:
        i = bisect_left(self.values, x)
        if i == len(self.slots) or self.slots[i] >= bound:
            return None
        return self.slots[i]


# -- pivots ---------------------------------------------------------------


def pivot_mask(exec_: Execution) -> np.ndarray:
    """Boolean array, index t for slot t (index 0 unused), True at pivots.

    A violating interval has D(s) <= D(r) and contains a successful slot.
    For a successful t that is a prefix-max / suffix-min comparison; an empty
    t must borrow the nearest successful slot on one side.
    """
    cls, _, _, d = _prefix(exec_)
    T = exec_.horizon
    out = np.zeros(T + 1, dtype=bool)
    if T == 0:
        return out
    pmax = np.maximum.accumulate(d)
    smin = np.minimum.accumulate(d[::-1])[::-1]
    succ = cls != SlotClass.EMPTY
    succ[0] = False
    idx = np.arange(T + 1)
    last_succ = np.maximum.accumulate(np.where(succ, idx, 0))
    nxt = np.where(succ, idx, T + 1)
    next_succ = np.minimum.accumulate(nxt[::-1])[::-1]
    for t in range(1, T + 1):
        if succ[t]:
            bad = pmax[t - 1] >= smin[t]
        else:
            a, b = last_succ[t], next_succ[t]
            bad = (a >= 1 and pmax[a - 1] >= smin[t]) or (b <= T and pmax[t - 1] >= smin[b])
        out[t] = not bad
    return out


def check_pivot(exec_: Execution, t: int) -> bool:
    if not 1 <= t <= exec_.horizon:
        raise IndexError(f"slot {t} outside 1..{exec_.horizon}")
    return bool(pivot_mask(exec_)[t])


def unique_pivots(exec_: Execution) -> np.ndarray:
    cls = np.concatenate(([SlotClass.EMPTY], exec_.classes()))
    return np.flatnonzero(pivot_mask(exec_) & (cls == SlotClass.UNIQUE))


def min_pivot_gap(exec_: Execution) -> int:
    """Smallest gamma for which FreqPivots holds (T_h + 1 if there are no unique pivots)."""
    piv = unique_pivots(exec_)
    T = exec_.horizon
    if len(piv) == 0:
        return T + 1
    gaps = np.diff(np.concatenate(([0], piv)))
    return int(max(gaps.max(), T - piv[-1] + 1))


def check_freq_pivots(exec_: Execution, gamma: int) -> bool:
    if gamma < 1:
        raise ValueError("gamma must be at least 1")
    return min_pivot_gap(exec_) <= gamma


# -- ShortPrefixes ----------------------------------------------------------


def short_prefix_profile(exec_: Execution) -> np.ndarray:
    """For each t (index t), the max N(r,t] over qualifying r; 0 when none qualify."""
    cls, u, n, d = _prefix(exec_)
    rec = _Records(cls, d)
    T = exec_.horizon
    out = np.zeros(T + 1, dtype=np.int64)
    for t in range(1, T + 1):
        r = rec.earliest(int(d[t]), t)
        if r is not None:
            out[t] = n[t] - n[r]
    return out


def check_short_prefixes(exec_: Execution, k: int) -> bool:
    if k < 1:
        raise ValueError("k must be at least 1")
    prof = short_prefix_profile(exec_)
    return int(prof.max(initial=0)) < k


# -- FewLongChains ----------------------------------------------------------


class _WTable:
    def __init__(self, exec_: Execution):
        self.cls, self.u, self.n, self.d = _prefix(exec_)
        self.rec = _Records(self.cls, self.d)

    def w(self, s: int, t: int) -> int:
        # N(r,s] >= U(r,t]  <=>  D(r) >= U_c(t) - N_c(s); the earliest r maximises N(r,s].
        r = self.rec.earliest(int(self.u[t] - self.n[s]), s)
        return 0 if r is None else int(self.n[s] - self.n[r])


def compute_w(exec_: Execution, s: int, t: int) -> int:
    if not 0 <= s <= t <= exec_.horizon:
        raise IndexError("need 0 <= s <= t <= T_h")
    return _WTable(exec_).w(s, t)


def few_long_chains_profile(exec_: Execution) -> np.ndarray:
    """Left-hand side W_{t-1,t-1} + sum_{s<=t} A_s W_{s,t} for each t (index t)."""
    tab = _WTable(exec_)
    T = exec_.horizon
    adv = np.concatenate(([0], exec_.adversarial_counts))
    adv_slots = [int(s) for s in np.flatnonzero(adv)]
    out = np.zeros(T + 1, dtype=np.int64)
    for t in range(1, T + 1):
        total = tab.w(t - 1, t - 1)
        for s in adv_slots:
            if s > t:
                break
            total += int(adv[s]) * tab.w(s, t)
        out[t] = total
    return out


def check_few_long_chains(exec_: Execution, k: int) -> bool:
    if k < 1:
        raise ValueError("k must be at least 1")
    return int(few_long_chains_profile(exec_).max(initial=0)) < k


def check_maxdl(trace: Trace) -> bool:
    return _trace_maxdl(trace)


# -- naive twins --------------------------------------------------------------


def _naive_counts(exec_: Execution) -> list[str]:
    cls = [""] + ["EUA"[int(c)] for c in exec_.classes()]
    return cls


def _naive_interval(cls: list[str], r: int, s: int) -> tuple[int, int]:
    u = sum(1 for x in range(r + 1, s + 1) if cls[x] == "U")
    a = sum(1 for x in range(r + 1, s + 1) if cls[x] == "A")
    return u, a


def _naive_tallies(cls: list[str]) -> tuple[list[int], list[int]]:
    u, a = [0], [0]
    for c in cls[1:]:
        u.append(u[-1] + (c == "U"))
        a.append(a[-1] + (c == "A"))
    return u, a


def naive_check_pivot(exec_: Execution, t: int) -> bool:
    cls = _naive_counts(exec_)
    uc, ac = _naive_tallies(cls)
    T = exec_.horizon
    for r in range(0, t):
        for s in range(t, T + 1):
            u, a = uc[s] - uc[r], ac[s] - ac[r]
            if not (u > a or a == 0):
                return False
    return True


def naive_check_freq_pivots(exec_: Execution, gamma: int) -> bool:
    cls = _naive_counts(exec_)
    T = exec_.horizon
    good = [t for t in range(1, T + 1) if cls[t] == "U" and naive_check_pivot(exec_, t)]
    for t in range(0, T - gamma + 1):
        if not any(t < g <= t + gamma for g in good):
            return False
    return True


def naive_short_prefix_max(exec_: Execution) -> int:
    cls = _naive_counts(exec_)
    best = 0
    for t in range(1, exec_.horizon + 1):
        for r in range(0, t):
            if r and cls[r] != "U":
                continue
            u, a = _naive_interval(cls, r, t)
            if a >= u:
                best = max(best, a)
    return best


def naive_check_short_prefixes(exec_: Execution, k: int) -> bool:
    return naive_short_prefix_max(exec_) < k


def naive_compute_w(exec_: Execution, s: int, t: int) -> int:
    cls = _naive_counts(exec_)
    best = 0
    for r in range(0, s):
        if r and cls[r] != "U":
            continue
        a_rs = _naive_interval(cls, r, s)[1]
        u_rt = _naive_interval(cls, r, t)[0]
        if a_rs >= u_rt:
            best = max(best, a_rs)
    return best


def naive_few_long_chains_max(exec_: Execution) -> int:
    adv = [0] + [int(x) for x in exec_.adversarial_counts]
    best = 0
    for t in range(1, exec_.horizon + 1):
        total = naive_compute_w(exec_, t - 1, t - 1)
        for s in range(1, t + 1):
            if adv[s]:
                total += adv[s] * naive_compute_w(exec_, s, t)
        best = max(best, total)
    return best


def naive_check_few_long_chains(exec_: Execution, k: int) -> bool:
    return naive_few_long_chains_max(exec_) < k


# -- closed-form bounds -------------------------------------------------------


def _clamp_exp(log_value: float) -> float:
    return 1.0 if log_value >= 0 else math.exp(log_value)


def _logsumexp(*terms: float) -> float:
    m = max(terms)
    if m == -math.inf:
        return m
    return m + math.log(sum(math.exp(x - m) for x in terms))


def _consts(params: ProtocolParams) -> DerivedConstants:
    return constants_for(params.rho, params.beta)


def alpha2(params: ProtocolParams, bp: BoundParams) -> float:
    c = _consts(params)
    e2 = bp.epsilon2
    return min(bp.epsilon1**2 / 36, e2**2 / (e2 + 2) * c.p_a / c.p)


def short_prefixes_k(params: ProtocolParams, bp: BoundParams) -> int:
    """Budget the ShortPrefixes bound speaks about: p_A T (1 + eps2), rounded up."""
    c = _consts(params)
    return math.ceil(c.p_a * bp.t_window * (1 + bp.epsilon2))


def bound_short_prefixes(params: ProtocolParams, bp: BoundParams) -> float:
    c = _consts(params)
    th = params.horizon
    log_b = math.log(2) + 2 * math.log(th) - alpha2(params, bp) * c.p * bp.t_window
    return _clamp_exp(log_b)


def alpha3(params: ProtocolParams, bp: BoundParams, reading: str = "max") -> float:
    """Rate constant of the FewLongChains bound; ``reading`` picks max or min of the terms."""
    c = _consts(params)
    e2, e3 = bp.epsilon2, bp.epsilon3
    terms = [
        bp.epsilon1**2 / 36,
        e2**2 / (e2 + 2) * c.p_a / c.p,
        c.p_u * (1 - e3) / c.p * math.log(c.p_u / (1 - c.p_u)),
        e3**2 * c.p_u / (2 * c.p),
        e3**2 * params.beta * params.rho / ((e3 + 2) * c.p),
    ]
    if reading == "max":
        return max(terms)
    if reading == "min":
        return min(terms)
    raise ValueError(f"reading must be 'max' or 'min', got {reading!r}")


def few_long_chains_k(params: ProtocolParams, bp: BoundParams) -> int:
    c = _consts(params)
    tb = bp.t_window
    return math.ceil(c.p_a * tb * (1 + params.beta * params.rho * tb * (1 + bp.epsilon3)) * (1 + bp.epsilon2))


def bound_few_long_chains(params: ProtocolParams, bp: BoundParams, reading: str = "max") -> float:
    c = _consts(params)
    th = params.horizon
    log_b = math.log(5) + 2 * math.log(th) - alpha3(params, bp, reading) * c.p * bp.t_window
    return _clamp_exp(log_b)


def bound_few_long_chains_both(params: ProtocolParams, bp: BoundParams) -> dict[str, float]:
    return {r: bound_few_long_chains(params, bp, r) for r in ("max", "min")}


@dataclass(frozen=True)
class PivotBound:
    bound: float
    log_bound: float
    w: int
    v: int
    gamma: float  # may be inf when the default exceeds float range
    log_gamma: float
    alpha1_prime: float
    log_alpha1_second: float
    log_p1: float

    @property
    def alpha1_second(self) -> float:
        return math.exp(self.log_alpha1_second)

    @property
    def p1(self) -> float:
        return math.exp(self.log_p1)


def bound_freq_pivots(params: ProtocolParams, bp: BoundParams) -> PivotBound:
    """Two-term FreqPivots bound; w, v and the default gamma are rounded up to slots.

    ``bp.gamma`` overrides the gamma the bound is evaluated at.
    """
    c = _consts(params)
    th = params.horizon
    a1 = bp.epsilon1**2 / 36
    x = a1 * c.p
    e = math.exp(-x)
    v = math.ceil(math.log(4 * (1 + e) / (1 - e) ** 2) / x)
    w = max(math.ceil((2 * math.log(math.sqrt(2) * th) + bp.kappa) / x), 2 * v + 1)
    log_p1 = math.log(0.5) + (2 * v - 1) * math.log1p(-c.p_a)
    log_a2 = log_p1 + math.log(c.p_u / 2)
    if bp.gamma is not None:
        gamma = float(bp.gamma)
        log_gamma = math.log(gamma)
    else:
        # gamma = (ln T_h + kappa) w / alpha1'', kept in log space: alpha1'' underflows easily.
        log_gamma = math.log(math.log(th) + bp.kappa) + math.log(w) - log_a2
        gamma = math.ceil(math.exp(log_gamma)) if log_gamma < 700 else math.inf
    log_first = math.log(2) + 2 * math.log(th) - x * w
    log_second = math.log(th) - math.exp(log_a2 + log_gamma - math.log(w))
    log_b = _logsumexp(log_first, log_second)
    return PivotBound(_clamp_exp(log_b), log_b, w, v, gamma, log_gamma, a1, log_a2, log_p1)


# -- security condition -------------------------------------------------------


def security_residual(rho: float, beta: float, epsilon1: float) -> float:
    """LHS - RHS of (1-beta) rho e^-rho = (1 - e^-rho)(1 + eps1)/2."""
    return (1 - beta) * rho * math.exp(-rho) + math.expm1(-rho) * (1 + epsilon1) / 2


def epsilon1_for(rho: float, beta: float) -> float:
    """The slack the condition leaves at (rho, beta): 2 p_U / p - 1."""
    c = constants_for(rho, beta)
    return 2 * c.p_u / c.p - 1


def solve_rho(beta: float, epsilon1: float, rho_max: float = RHO_MAX) -> float | None:
    """Positive root of the security condition, or None if there is none.

    The residual divided by rho is strictly decreasing, so a root exists
    exactly when it is positive near zero, i.e. eps1 < 1 - 2 beta.
    """
    if not 0.0 <= beta < 0.5:
        raise DomainError(f"beta must lie in [0, 1/2), got {beta}")
    if not 0.0 < epsilon1 < 1.0:
        raise DomainError(f"epsilon1 must lie in (0, 1), got {epsilon1}")
    if epsilon1 >= 1 - 2 * beta:
        return None
    lo, hi = 0.0, rho_max
    if security_residual(hi, beta, epsilon1) > 0:
        return None
    while True:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if security_residual(mid, beta, epsilon1) > 0:
            lo = mid
        else:
            hi = mid
    a, b = abs(security_residual(lo, beta, epsilon1)), abs(security_residual(hi, beta, epsilon1))
    return lo if a <= b and lo > 0 else hi


# -- throughput ---------------------------------------------------------------


@dataclass(frozen=True)
class ThroughputBounds:
    theta: float
    phi_p: float
    phi_idle: float
    tp_m: float
    floor: float


def throughput_bounds(params: ProtocolParams, m: int = 1) -> ThroughputBounds:
    """Rates in blocks per slot; the bandwidth term C*tau is taken as K."""
    if m < 1:
        raise ValueError("m must be at least 1")
    c = _consts(params)
    theta = 2 * c.p_u - c.p
    phi_idle = c.p_u * (1 - c.p) / c.p
    floor = (1 - c.p) * (theta / c.p) / 2 * params.budget_k
    return ThroughputBounds(theta, c.p, phi_idle, m * theta, floor)


# -- parameter planning ---------------------------------------------------------


def short_prefixes_window(params: ProtocolParams, k: int, epsilon2: float) -> float:
    """Largest window T whose ShortPrefixes budget p_A T (1 + eps2) fits in k."""
    c = _consts(params)
    return k / (c.p_a * (1 + epsilon2))


def few_long_chains_window(params: ProtocolParams, k: int, epsilon2: float, epsilon3: float) -> float:
    """Largest T_b with p_A T_b (1 + beta rho T_b (1 + eps3)) (1 + eps2) <= k."""
    c = _consts(params)
    a = c.p_a * (1 + epsilon2) * params.beta * params.rho * (1 + epsilon3)
    b = c.p_a * (1 + epsilon2)
    if a == 0:
        return k / b
    return (-b + math.sqrt(b * b + 4 * a * k)) / (2 * a)


def solve_params(beta: float, epsilon1: float, k: int, t_h: int, kappa: float = 0.0,
                 epsilon2: float = 1.0, epsilon3: float = 0.5) -> dict:
    """Theory-side recommendations for (beta, eps1, K, T_h, kappa)."""
    rho = solve_rho(beta, epsilon1)
    if rho is None:
        raise DomainError(f"no positive rho: epsilon1={epsilon1} >= 1 - 2*beta = {1 - 2 * beta}")
    params = ProtocolParams(rho=rho, beta=beta, budget_k=k, horizon=t_h, lottery_mode="poisson")
    c = _consts(params)
    t_sp = short_prefixes_window(params, k, epsilon2)
    t_b = few_long_chains_window(params, k, epsilon2, epsilon3)
    bp = BoundParams(epsilon1=epsilon1, epsilon2=epsilon2, epsilon3=epsilon3, kappa=kappa, t_window=t_sp)
    bp_b = BoundParams(epsilon1=epsilon1, epsilon2=epsilon2, epsilon3=epsilon3, kappa=kappa, t_window=t_b)
    piv = bound_freq_pivots(params, bp)
    return {
        "beta": beta,
        "epsilon1": epsilon1,
        "rho": rho,
        "residual": security_residual(rho, beta, epsilon1),
        "p": c.p,
        "p_u": c.p_u,
        "p_a": c.p_a,
        "k": k,
        "t_h": t_h,
        "kappa": kappa,
        "alpha1_prime": piv.alpha1_prime,
        "alpha1_second": piv.alpha1_second,
        "log_alpha1_second": piv.log_alpha1_second,
        "p1": piv.p1,
        "log_p1": piv.log_p1,
        "v": piv.v,
        "w": piv.w,
        "gamma": piv.gamma,
        "log_gamma": piv.log_gamma,
        "t_conf": piv.gamma,
        "t_live": 2 * piv.gamma,
        "alpha2": alpha2(params, bp),
        "alpha3_max": alpha3(params, bp_b, "max"),
        "alpha3_min": alpha3(params, bp_b, "min"),
        "t_window_short_prefixes": t_sp,
        "t_window_few_long_chains": t_b,
        "bound_short_prefixes": bound_short_prefixes(params, bp),
        "bound_few_long_chains_max": bound_few_long_chains(params, bp_b, "max"),
        "bound_few_long_chains_min": bound_few_long_chains(params, bp_b, "min"),
        "bound_freq_pivots": piv.bound,
        "log_bound_freq_pivots": piv.log_bound,
    }


@dataclass(frozen=True)
class DeskProfile:
    """Monte Carlo calibration of gamma and K at simulation scale."""

    samples: int
    gap_q50: float
    gap_q99: float
    gap_max: int
    short_prefix_max: int
    few_long_chains_max: int
    gamma: int
    k_freshest: int
    k_equivocation: int

    @property
    def t_conf(self) -> int:
        return self.gamma

    @property
    def t_live(self) -> int:
        return 2 * self.gamma


def desk_profile(rho: float, beta: float, t_h: int, samples: int = 200, seed: int = 0,
                 margin: float = 1.25, few_long_chains: bool = True) -> DeskProfile:
    """Sample executions and size gamma and K from the observed worst cases, times ``margin``."""
    params = ProtocolParams(rho=rho, beta=beta, horizon=t_h, lottery_mode="poisson")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(99,)))
    gaps, sp, flc = [], [], []
    for _ in range(samples):
        ex = sample_counts(params, rng)
        gaps.append(min_pivot_gap(ex))
        sp.append(int(short_prefix_profile(ex).max(initial=0)))
        if few_long_chains:
            flc.append(int(few_long_chains_profile(ex).max(initial=0)))
    g = np.array(gaps)
    return DeskProfile(
        samples=samples,
        gap_q50=float(np.quantile(g, 0.5)),
        gap_q99=float(np.quantile(g, 0.99)),
        gap_max=int(g.max()),
        short_prefix_max=max(sp),
        few_long_chains_max=max(flc) if flc else -1,
        gamma=math.ceil(margin * g.max()),
        k_freshest=math.ceil(margin * (max(sp) + 1)),
        k_equivocation=math.ceil(margin * (max(flc) + 1)) if flc else -1,
    )
