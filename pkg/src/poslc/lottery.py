"""Protocol parameters, derived slot probabilities and execution sampling.

An execution is the per-slot leader draw of a run. In ``binomial`` mode every
node flips its own coin with success probability rho/N per slot; in
``poisson`` mode the honest and adversarial leader counts are independent
Poisson variables with means (1-beta)*rho and beta*rho.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from enum import IntEnum

import numpy as np

RULE_IDS = ("freshest", "longest-header", "equivocation-avoidance", "blocklisting")
ADVERSARY_IDS = ("null", "spam-equivocation", "private-withhold", "spam-then-fork")
LOTTERY_MODES = ("binomial", "poisson")

# Named sub-streams. Indices are part of the reproducibility contract: adding a
# consumer must append, never renumber.
STREAM_NAMES = ("lottery", "identities", "adversary", "tiebreak", "partition")


class ConfigError(ValueError):
    """Raised for parameter combinations that cannot describe a run."""


@dataclass(frozen=True)
class ProtocolParams:
    rho: float = 0.06
    beta: float = 0.25
    num_nodes: int = 20
    budget_k: int = 4
    t_conf: int = 10
    horizon: int = 1000
    lottery_mode: str = "binomial"
    seed: int = 0
    rule_id: str = "freshest"
    adversary_id: str = "null"
    parallel_m: int = 1
    # Extensions beyond the core parameter set.
    download_cap: int | None = None
    warmup_frac: float = 0.1
    epsilon7: float = 0.1

    def __post_init__(self) -> None:
        if not (self.rho > 0 and math.isfinite(self.rho)):
            raise ConfigError(f"rho must be positive and finite, got {self.rho}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")
        if self.num_nodes < 1:
            raise ConfigError("num_nodes must be >= 1")
        if self.budget_k < 1:
            raise ConfigError("budget_k must be >= 1")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.t_conf < 0:
            raise ConfigError("t_conf must be >= 0")
        if self.lottery_mode not in LOTTERY_MODES:
            raise ConfigError(f"unknown lottery_mode {self.lottery_mode!r}")
        if self.rule_id not in RULE_IDS:
            raise ConfigError(f"unknown rule_id {self.rule_id!r}")
        if self.adversary_id not in ADVERSARY_IDS:
            raise ConfigError(f"unknown adversary_id {self.adversary_id!r}")
        if self.parallel_m < 1:
            raise ConfigError("parallel_m must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.download_cap is not None and not 1 <= self.download_cap <= self.budget_k:
            raise ConfigError("download_cap must lie in [1, budget_k]")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError("warmup_frac must lie in [0, 1)")
        if self.lottery_mode == "binomial":
            scaled = self.beta * self.num_nodes
            if abs(scaled - round(scaled)) > 1e-9:
                raise ConfigError(
                    f"beta*num_nodes = {scaled} must be integral in binomial mode"
                )

    @property
    def num_corrupted(self) -> int:
        return int(math.floor(self.beta * self.num_nodes + 1e-9))

    def with_(self, **changes) -> "ProtocolParams":
        return replace(self, **changes)

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))


@dataclass(frozen=True)
class DerivedConstants:
    p: float
    p_u: float
    p_a: float


def derive_constants(params: ProtocolParams) -> DerivedConstants:
    return constants_for(params.rho, params.beta)


def constants_for(rho: float, beta: float) -> DerivedConstants:
    p = -math.expm1(-rho)
    p_u = (1.0 - beta) * rho * math.exp(-rho)
    return DerivedConstants(p=p, p_u=p_u, p_a=p - p_u)


class SlotClass(IntEnum):
    EMPTY = 0
    UNIQUE = 1
    ADVERSARIAL = 2
    # Long-form aliases.
    Empty = 0
    UniquelySuccessful = 1
    Adversarial = 2


@dataclass
class Execution:
    """Leader counts per slot; index 0 of each array is slot 1.

    ``leaders`` maps a non-empty slot to the sorted tuple of leader ids and is
    ``None`` for count-only executions used by the analysis Monte Carlo.
    """

    honest_counts: np.ndarray
    adversarial_counts: np.ndarray
    corrupted: frozenset[int] = frozenset()
    leaders: dict[int, tuple[int, ...]] | None = None
    _prefix: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.honest_counts = np.asarray(self.honest_counts, dtype=np.int64)
        self.adversarial_counts = np.asarray(self.adversarial_counts, dtype=np.int64)
        if self.honest_counts.shape != self.adversarial_counts.shape:
            raise ValueError("honest and adversarial counts must have equal length")
        if self.honest_counts.ndim != 1:
            raise ValueError("counts must be one-dimensional")
        if (self.honest_counts < 0).any() or (self.adversarial_counts < 0).any():
            raise ValueError("counts must be non-negative")

    @property
    def horizon(self) -> int:
        return int(self.honest_counts.shape[0])

    def classes(self) -> np.ndarray:
        """Slot classes as an int8 array (index 0 is slot 1)."""
        h, a = self.honest_counts, self.adversarial_counts
        out = np.where(h + a > 0, SlotClass.ADVERSARIAL, SlotClass.EMPTY).astype(np.int8)
        out[(h == 1) & (a == 0)] = SlotClass.UNIQUE
        return out

    def cumulative(self) -> tuple[np.ndarray, np.ndarray]:
        """Prefix counts (U_c, N_c) with U_c[t] = U_(0,t]; length T_h + 1."""
        if self._prefix is None:
            cls = self.classes()
            u = np.zeros(self.horizon + 1, dtype=np.int64)
            n = np.zeros(self.horizon + 1, dtype=np.int64)
            np.cumsum(cls == SlotClass.UNIQUE, out=u[1:])
            np.cumsum(cls == SlotClass.ADVERSARIAL, out=n[1:])
            self._prefix = (u, n)
        return self._prefix

    def leaders_at(self, t: int) -> tuple[int, ...]:
        if self.leaders is None:
            raise ValueError("count-only execution carries no leader identities")
        return self.leaders.get(t, ())

    @classmethod
    def from_classes(cls, pattern: str) -> "Execution":
        """Build a count-only execution from a string over {U, A, E, '.'}."""
        h, a = [], []
        for ch in pattern:
            if ch == "U":
                h.append(1), a.append(0)
            elif ch == "A":
                h.append(0), a.append(1)
            elif ch in "E.":
                h.append(0), a.append(0)
            else:
                raise ValueError(f"bad slot symbol {ch!r}")
        return cls(np.array(h), np.array(a))


def run_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators per purpose, all derived from one root seed."""
    return {
        name: np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
        for i, name in enumerate(STREAM_NAMES)
    }


def choose_corrupted(params: ProtocolParams, stream: np.random.Generator) -> frozenset[int]:
    n_bad = params.num_corrupted
    ids = stream.choice(params.num_nodes, size=n_bad, replace=False) if n_bad else []
    return frozenset(int(i) for i in ids)


def sample_counts(params: ProtocolParams, stream: np.random.Generator) -> Execution:
    """Count-only execution (no identities): the fast path for Monte Carlo."""
    t_h = params.horizon
    if params.lottery_mode == "poisson":
        h = stream.poisson((1.0 - params.beta) * params.rho, size=t_h)
        a = stream.poisson(params.beta * params.rho, size=t_h)
    else:
        q = params.rho / params.num_nodes
        n_bad = params.num_corrupted
        h = stream.binomial(params.num_nodes - n_bad, q, size=t_h)
        a = stream.binomial(n_bad, q, size=t_h)
    return Execution(h, a)


def sample_execution(
    params: ProtocolParams,
    stream: np.random.Generator,
    identity_stream: np.random.Generator | None = None,
    corrupted: frozenset[int] | None = None,
) -> Execution:
    """Sample leader counts and identities for every slot.

    Counts come from ``stream``; identities (which nodes lead, given the counts)
    from ``identity_stream`` so that count statistics do not depend on N's
    labelling. Poisson counts are clamped to the class sizes when assigning
    identities, which matters only for tiny N.
    """
    if identity_stream is None:
        identity_stream = stream
    if corrupted is None:
        corrupted = choose_corrupted(params, identity_stream)
    base = sample_counts(params, stream)
    bad = np.array(sorted(corrupted), dtype=np.int64)
    good = np.array([i for i in range(params.num_nodes) if i not in corrupted], dtype=np.int64)
    h = np.minimum(base.honest_counts, good.size)
    a = np.minimum(base.adversarial_counts, bad.size)
    leaders: dict[int, tuple[int, ...]] = {}
    for idx in np.flatnonzero(h + a):
        chosen = []
        if h[idx]:
            chosen.extend(identity_stream.choice(good, size=int(h[idx]), replace=False).tolist())
        if a[idx]:
            chosen.extend(identity_stream.choice(bad, size=int(a[idx]), replace=False).tolist())
        leaders[int(idx) + 1] = tuple(sorted(int(x) for x in chosen))
    return Execution(h, a, corrupted=frozenset(corrupted), leaders=leaders)


def classify_slot(execution: Execution, t: int) -> SlotClass:
    if not 1 <= t <= execution.horizon:
        raise IndexError(f"slot {t} outside 1..{execution.horizon}")
    h = int(execution.honest_counts[t - 1])
    a = int(execution.adversarial_counts[t - 1])
    if h + a == 0:
        return SlotClass.EMPTY
    if h == 1 and a == 0:
        return SlotClass.UNIQUE
    return SlotClass.ADVERSARIAL


def count_interval(execution: Execution, r: int, s: int) -> tuple[int, int, int]:
    """(U, N, B) over the half-open slot interval (r, s]."""
    if r > s:
        raise IndexError(f"empty-reversed interval ({r}, {s}]")
    if r < 0 or s > execution.horizon:
        raise IndexError(f"interval ({r}, {s}] outside 0..{execution.horizon}")
    u_c, n_c = execution.cumulative()
    u = int(u_c[s] - u_c[r])
    n = int(n_c[s] - n_c[r])
    return u, n, u + n
