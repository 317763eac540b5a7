"""Slot loop, trace recording, safety and liveness verdicts, run metrics."""

from __future__ import annotations

import hashlib
import io
from functools import partial
from dataclasses import dataclass, field

import numpy as np

from . import environment as envmod
from .adversary import Adversary, make_adversary
from .headertree import GENESIS, GlobalHeaderSet
from .lottery import ConfigError, Execution, ProtocolParams, choose_corrupted, run_streams, sample_execution
from .node import NodeState, download_tick, propose
from .rules import DOWNLOADED, FILTERED_RULES, LocalView


class InvariantBreach(RuntimeError):
    """An internal consistency check failed: a simulator bug, never an outcome."""


@dataclass(frozen=True)
class ProbeSchedule:
    """Probe transactions injected at ``start``, ``start + interval``, ..."""

    start: int = 1
    interval: int = 0

    def slots(self, horizon: int) -> list[int]:
        if self.interval <= 0:
            return []
        return list(range(max(1, self.start), horizon + 1, self.interval))


@dataclass
class Trace:
    params: ProtocolParams
    honest_ids: list[int]
    corrupted: frozenset[int]
    execution: Execution
    lengths: np.ndarray  # (T_h + 1, n) dC heights, row 0 = genesis
    used: np.ndarray
    wasted: np.ndarray
    idle: np.ndarray
    ledger_tips: np.ndarray
    unique: np.ndarray  # bool per slot
    maxdl: np.ndarray  # -1 not applicable, 0 / 1 witness
    events: list[str]
    block_parent: np.ndarray
    block_slot: np.ndarray
    block_producer: np.ndarray
    block_height: np.ndarray
    block_probes: list[int]
    probe_slots: list[int]
    onset: int | None = None
    final_dc: list[int] = field(default_factory=list)

    @property
    def horizon(self) -> int:
        return self.params.horizon

    @property
    def lmin(self) -> np.ndarray:
        if self.lengths.shape[1] == 0:
            return np.zeros(self.lengths.shape[0], dtype=np.int64)
        return self.lengths.min(axis=1)

    def block_honest(self, block: int) -> bool:
        prod = int(self.block_producer[block])
        return prod < 0 or prod not in self.corrupted

    def is_prefix(self, a: int, b: int) -> bool:
        hgt, par = self.block_height, self.block_parent
        ha = hgt[a]
        while hgt[b] > ha:
            b = par[b]
        return a == b

    def cumulative_probes(self) -> list[int]:
        cum = [0] * len(self.block_parent)
        par = self.block_parent
        for b in range(1, len(cum)):
            cum[b] = cum[par[b]] | self.block_probes[b]
        return cum


class Simulation:
    """One run, steppable slot by slot."""

    def __init__(self, params: ProtocolParams, probes: ProbeSchedule | None = None, audit: bool = False):
        if params.parallel_m != 1:
            raise ConfigError("use poslc.parallel.run_parallel for parallel_m > 1")
        self.params = params
        self.audit = audit
        streams = run_streams(params.seed)
        corrupted = choose_corrupted(params, streams["identities"])
        self.execution = sample_execution(params, streams["lottery"], streams["identities"], corrupted)
        self.corrupted = corrupted
        self.gs = GlobalHeaderSet(self.execution, params.num_nodes)
        self.env = envmod.Environment(self.gs, params.num_nodes, params.budget_k)
        self.adversary: Adversary = make_adversary(params.adversary_id, corrupted)
        self.adversary.bind(self)
        hooks = self.adversary.hooks()
        self.honest_ids = [i for i in range(params.num_nodes) if i not in corrupted]
        self.nodes: list[NodeState] = []
        for i in self.honest_ids:
            node = NodeState(i, LocalView(self.gs, params.rule_id), self.env, params.rule_id, params.t_conf, hooks)
            self.env.attach(node)
            self.nodes.append(node)
        self.node_by_id = {n.node_id: n for n in self.nodes}
        self.now = 0
        self.probe_slots = (probes or ProbeSchedule()).slots(params.horizon)
        self._probe_cursor = 0
        self._injected = 0
        self._cum_probe = [0]
        t_h, n = params.horizon, len(self.nodes)
        self.lengths = np.zeros((t_h + 1, n), dtype=np.int64)
        self.used = np.zeros((t_h + 1, n), dtype=np.int64)
        self.wasted = np.zeros((t_h + 1, n), dtype=np.int64)
        self.idle = np.zeros((t_h + 1, n), dtype=np.int64)
        self.ledger_tips = np.zeros((t_h + 1, n), dtype=np.int64)
        self.unique = np.zeros(t_h + 1, dtype=bool)
        self.maxdl = np.full(t_h + 1, -1, dtype=np.int8)
        self.events = [""] * (t_h + 1)
        self._dc_key: tuple[int, ...] | None = None
        self._prefix = GENESIS

    # -- helpers the adversary relies on ----------------------------------

    def common_prefix(self) -> int:
        """Deepest block shared by every honest node's downloaded chain."""
        if not self.nodes:
            return GENESIS
        key = tuple(n.longest_downloaded for n in self.nodes)
        if key == self._dc_key:
            return self._prefix
        paths = [n.dc_path for n in self.nodes]
        lo, hi = 0, min(len(p) for p in paths) - 1
        while lo < hi:
            mid = (lo + hi + 1) // 2
            ref = paths[0][mid]
            if all(p[mid] == ref for p in paths):
                lo = mid
            else:
                hi = mid - 1
        self._dc_key = key
        self._prefix = paths[0][lo]
        return self._prefix

    def _cum(self, block: int) -> int:
        cum = self._cum_probe
        if len(cum) <= block:
            par = self.gs.parent
            reg = self.env.registry.probes
            content = self.gs.content
            for b in range(len(cum), block + 1):
                cum.append(cum[par[b]] | reg[content[b]])
        return cum[block]

    # -- slot loop -------------------------------------------------------

    def step(self) -> None:
        t = self.now + 1
        if t > self.params.horizon:
            raise IndexError("simulation already complete")
        self.now = t
        env, params, adv = self.env, self.params, self.adversary
        env.now = t
        env.budgets.reset()
        while self._probe_cursor < len(self.probe_slots) and self.probe_slots[self._probe_cursor] <= t:
            self._injected |= 1 << self._probe_cursor
            self._probe_cursor += 1
        events = []
        proposed = {}
        for i in self.execution.leaders_at(t):
            node = self.node_by_id.get(i)
            if node is None:
                continue
            pending = self._injected & ~self._cum(node.longest_downloaded) if self._injected else 0
            blk = propose(node, t, pending)
            if blk is not None:
                proposed[i] = blk
                events.append(f"propose={i}:{blk}")
        adv.on_phase1(t)
        env.deliver_pending()
        for blk in proposed.values():
            for node in self.nodes:
                if not node.view.knows(blk):
                    raise InvariantBreach(f"slot {t}: honest block {blk} not delivered to node {node.node_id}")
        if params.rule_id in FILTERED_RULES:
            hook = None if adv.passive else adv.hooks().retain
            for node in self.nodes:
                retain = None if hook is None else partial(hook, node.node_id)
                node.view.refresh_filter(t, retain)
        self._download_phase(t)
        self._record(t, proposed)
        events.extend(adv.take_events())
        self.events[t] = "|".join(events)

    def _download_phase(self, t: int) -> None:
        k = self.params.budget_k
        cap = self.params.download_cap or k
        adv = self.adversary
        passive = adv.passive
        n = len(self.nodes)
        used = [0] * n
        wasted = [0] * n
        active = [True] * n
        # A node that the adversary left alone and whose rule found nothing
        # stays idle for the rest of the slot: nothing it sees can change.
        for tick in range(k):
            any_active = False
            for idx, node in enumerate(self.nodes):
                if not active[idx]:
                    continue
                acted = False if passive else adv.on_tick(node.node_id, tick)
                if used[idx] >= cap:
                    active[idx] = False
                    continue
                target, ok, bad = download_tick(node)
                if ok:
                    used[idx] += 1
                    wasted[idx] += bad
                    any_active = True
                elif acted:
                    any_active = True
                else:
                    active[idx] = False
            if not any_active:
                break
        self.used[t] = used
        self.wasted[t] = wasted
        self.idle[t] = [k - u for u in used]

    def _record(self, t: int, proposed: dict[int, int]) -> None:
        lengths = [node.dc_height for node in self.nodes]
        self.lengths[t] = lengths
        if t > 1 and self.nodes and min(lengths) < self.lengths[t - 1].min():
            raise InvariantBreach(f"slot {t}: L_min decreased")
        for idx, node in enumerate(self.nodes):
            tip = node.log_tip(t)
            node.ledger_history.append(tip)
            self.ledger_tips[t, idx] = tip
            if self._injected:
                newly = self._cum(tip) & ~self._cum(int(self.ledger_tips[t - 1, idx]))
                while newly:
                    low = newly & -newly
                    node.probe_inclusions.setdefault(low.bit_length() - 1, t)
                    newly ^= low
        h = int(self.execution.honest_counts[t - 1])
        a = int(self.execution.adversarial_counts[t - 1])
        if h == 1 and a == 0:
            self.unique[t] = True
            blk = next(iter(proposed.values()), None)
            if blk is None:
                raise InvariantBreach(f"slot {t}: uniquely successful slot without a block")
            self.maxdl[t] = int(all(node.view.status[blk] == DOWNLOADED for node in self.nodes))
        if self.audit:
            self._audit(t)

    def _audit(self, t: int) -> None:
        gs = self.gs
        for node in self.nodes:
            st = node.view.status
            for b in node.dc_path:
                if st[b] != DOWNLOADED:
                    raise InvariantBreach(f"slot {t}: node {node.node_id} dC contains non-downloaded {b}")
            best = max(gs.height[b] for b in node.view.header_tree if st[b] == DOWNLOADED)
            if best != node.dc_height:
                raise InvariantBreach(f"slot {t}: node {node.node_id} dC not maximal")
            if node.dc_path[-1] != node.longest_downloaded:
                raise InvariantBreach("dC path out of sync")

    def run(self) -> "Trace":
        while self.now < self.params.horizon:
            self.step()
        return self.trace()

    def trace(self) -> Trace:
        gs = self.gs
        reg = self.env.registry.probes
        return Trace(
            params=self.params,
            honest_ids=list(self.honest_ids),
            corrupted=self.corrupted,
            execution=self.execution,
            lengths=self.lengths,
            used=self.used,
            wasted=self.wasted,
            idle=self.idle,
            ledger_tips=self.ledger_tips,
            unique=self.unique,
            maxdl=self.maxdl,
            events=self.events,
            block_parent=np.array(gs.parent, dtype=np.int64),
            block_slot=np.array(gs.slot, dtype=np.int64),
            block_producer=np.array(gs.producer, dtype=np.int64),
            block_height=np.array(gs.height, dtype=np.int64),
            block_probes=[reg[c] for c in gs.content],
            probe_slots=list(self.probe_slots),
            onset=getattr(self.adversary, "onset", None),
            final_dc=[n.longest_downloaded for n in self.nodes],
        )


def run(params: ProtocolParams, probes: ProbeSchedule | None = None, audit: bool = False) -> Trace:
    return Simulation(params, probes, audit).run()


# -- verdicts ---------------------------------------------------------------


@dataclass(frozen=True)
class SafetyVerdict:
    safe: bool
    slot: int | None = None
    node_i: int | None = None
    node_j: int | None = None
    kind: str = ""

    def __bool__(self) -> bool:
        return self.safe


def check_safety(trace: Trace) -> SafetyVerdict:
    """Self-monotone ledgers plus per-slot pairwise comparability."""
    tips = trace.ledger_tips
    hgt = trace.block_height
    n = tips.shape[1]
    prev = None
    for t in range(1, trace.horizon + 1):
        row = tips[t]
        for idx in range(n):
            if t > 1 and row[idx] != tips[t - 1, idx] and not trace.is_prefix(int(tips[t - 1, idx]), int(row[idx])):
                return SafetyVerdict(False, t, trace.honest_ids[idx], trace.honest_ids[idx], "self-monotonicity")
        key = tuple(row)
        if key == prev:
            continue
        prev = key
        order = sorted(range(n), key=lambda k: (hgt[row[k]], row[k]))
        for a, b in zip(order, order[1:]):
            if not trace.is_prefix(int(row[a]), int(row[b])):
                return SafetyVerdict(False, t, trace.honest_ids[a], trace.honest_ids[b], "conflict")
    return SafetyVerdict(True)


@dataclass(frozen=True)
class LivenessVerdict:
    status: str  # "LIVE", "NOT LIVE" or "INAPPLICABLE"
    checked: int = 0
    first_failure: tuple[int, int] | None = None  # (probe slot, node)

    @property
    def live(self) -> bool:
        return self.status == "LIVE"


def check_liveness(trace: Trace, t_live: int) -> LivenessVerdict:
    """Every probe injected at t_p is in every LOG at slot t_p + t_live."""
    if not trace.probe_slots:
        return LivenessVerdict("INAPPLICABLE")
    cum = trace.cumulative_probes()
    checked = 0
    for pid, t_p in enumerate(trace.probe_slots):
        deadline = t_p + t_live
        if deadline > trace.horizon:
            continue
        checked += 1
        bit = 1 << pid
        for idx in range(trace.ledger_tips.shape[1]):
            if not cum[int(trace.ledger_tips[deadline, idx])] & bit:
                return LivenessVerdict("NOT LIVE", checked, (t_p, trace.honest_ids[idx]))
    if checked == 0:
        return LivenessVerdict("INAPPLICABLE")
    return LivenessVerdict("LIVE", checked)


def check_maxdl(trace: Trace) -> bool:
    return bool((trace.maxdl[trace.unique] == 1).all())


def growth_rate(trace: Trace, start: int | None = None) -> float:
    t_h = trace.horizon
    if start is None:
        start = int(trace.params.warmup_frac * t_h)
    if start >= t_h:
        raise ConfigError("horizon shorter than warmup")
    lmin = trace.lmin
    return float(lmin[t_h] - lmin[start]) / (t_h - start)


def chain_quality(trace: Trace) -> float:
    """Honest share of the final downloaded chain, minimised over nodes."""
    worst = 1.0
    par = trace.block_parent
    for tip in trace.final_dc:
        total = honest = 0
        b = int(tip)
        while b != GENESIS:
            total += 1
            honest += trace.block_honest(b)
            b = int(par[b])
        if total:
            worst = min(worst, honest / total)
    return worst


def metrics(trace: Trace) -> dict[str, float]:
    k = trace.params.budget_k
    ticks = trace.used[1:].size * k
    unique = trace.unique
    n_unique = int(unique.sum())
    return {
        "growth": growth_rate(trace),
        "quality": chain_quality(trace),
        "idle": float(trace.idle[1:].sum()) / ticks if ticks else 0.0,
        "wasted": float(trace.wasted[1:].sum()) / ticks if ticks else 0.0,
        "maxdl": float((trace.maxdl[unique] == 1).sum()) / n_unique if n_unique else 1.0,
    }


# -- exports ----------------------------------------------------------------


def csv_header(n: int) -> list[str]:
    cols = ["slot", "Lmin"]
    for name in ("L", "used", "wasted", "idle"):
        cols.extend(f"{name}_{i}" for i in range(n))
    return cols + ["unique", "maxdl", "events"]


def write_trace_csv(trace: Trace, out) -> None:
    """Columns: slot, Lmin, L_i, used_i, wasted_i, idle_i (i = honest index),
    unique (0/1), maxdl (1/0, empty when the slot is not uniquely successful),
    events ('|'-separated). LF line endings, no quoting needed."""
    n = trace.lengths.shape[1]
    lmin = trace.lmin
    out.write(",".join(csv_header(n)) + "\n")
    for t in range(1, trace.horizon + 1):
        parts = [str(t), str(int(lmin[t]))]
        for arr in (trace.lengths, trace.used, trace.wasted, trace.idle):
            parts.extend(str(int(x)) for x in arr[t])
        parts.append("1" if trace.unique[t] else "0")
        parts.append("" if trace.maxdl[t] < 0 else str(int(trace.maxdl[t])))
        parts.append(trace.events[t])
        out.write(",".join(parts) + "\n")


def trace_csv_text(trace: Trace) -> str:
    buf = io.StringIO()
    write_trace_csv(trace, buf)
    return buf.getvalue()


def trace_hash(trace: Trace) -> str:
    return hashlib.sha256(trace_csv_text(trace).encode()).hexdigest()
