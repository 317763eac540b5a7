"""Parallel composition: m independent chain instances sharing one download budget.

Each honest node secures one primary instance (proposes there and runs the
configured download rule) and passively follows the others, downloading
only blocks on their T_conf-deep confirmed header chains with whatever budget
the primary rule leaves unused. Ledgers of all instances are merged by
(slot, instance).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import environment as envmod
from .analysis import throughput_bounds
from .headertree import GENESIS, GlobalHeaderSet
from .lottery import ConfigError, Execution, ProtocolParams, choose_corrupted, run_streams, sample_counts
from .node import NodeState, on_received_header_chain, propose
from .rules import LIVE, RULES, LocalView


@dataclass(frozen=True)
class ParallelAssignment:
    primary_of: dict[int, int]
    partition: tuple[tuple[int, ...], ...]

    @property
    def m(self) -> int:
        return len(self.partition)


def assign_primaries(params: ProtocolParams, stream: np.random.Generator) -> ParallelAssignment:
    m, n = params.parallel_m, params.num_nodes
    if n % m:
        raise ConfigError(f"parallel_m={m} must divide num_nodes={n}")
    perm = stream.permutation(n) if m > 1 else np.arange(n)
    size = n // m
    parts = tuple(tuple(sorted(int(x) for x in perm[j * size:(j + 1) * size])) for j in range(m))
    primary_of = {i: j for j, part in enumerate(parts) for i in part}
    return ParallelAssignment(primary_of, parts)


def capacity_plan(params: ProtocolParams) -> int:
    """Number of instances the idle bandwidth can carry, budget K per slot."""
    tb = throughput_bounds(params)
    if tb.theta <= 0:
        raise ValueError("security condition not met: 2 p_U <= p")
    return 1 + math.floor(tb.phi_idle * params.budget_k / tb.phi_p * (1 - params.epsilon7))


@dataclass(frozen=True)
class LedgerEntry:
    slot: int
    instance: int
    block_id: int
    height: int


@dataclass(frozen=True)
class MergedLedger:
    entries: tuple[LedgerEntry, ...]
    tmax: int

    def keys(self) -> list[tuple[int, int]]:
        return [(e.instance, e.block_id) for e in self.entries]

    def is_prefix_of(self, other: "MergedLedger") -> bool:
        mine = self.keys()
        return other.keys()[: len(mine)] == mine


def merge_ledgers(confirmed: list[list[tuple[int, int, int]]]) -> MergedLedger:
    """Merge per-instance confirmed chains given as (block_id, slot, height), genesis excluded.

    Only blocks up to tmax, the earliest of the instances' latest confirmed
    slots, are included, so no instance can later insert below the cutoff.
    """
    if not confirmed:
        return MergedLedger((), 0)
    tmax = min((chain[-1][1] if chain else 0) for chain in confirmed)
    entries = [
        LedgerEntry(slot, j, blk, hgt)
        for j, chain in enumerate(confirmed)
        for blk, slot, hgt in chain
        if slot <= tmax
    ]
    entries.sort(key=lambda e: (e.slot, e.instance))
    return MergedLedger(tuple(entries), tmax)


def write_merged_csv(ledger: MergedLedger, out) -> None:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["slot", "instance", "block_id", "height"])
    for e in ledger.entries:
        w.writerow([e.slot, e.instance, e.block_id, e.height])


class _Instance:
    def __init__(self, index: int, execution: Execution, params: ProtocolParams, budgets: envmod.BudgetLedger):
        self.index = index
        self.execution = execution
        self.gs = GlobalHeaderSet(execution, params.num_nodes)
        self.env = envmod.Environment(self.gs, params.num_nodes, params.budget_k)
        self.env.budgets = budgets
        self.states: dict[int, NodeState] = {}
        # Longest header chain per follower: (height, tip).
        self.header_tip: dict[int, tuple[int, int]] = {}


class _Follower(NodeState):
    """Secondary view: tracks its longest header chain alongside normal receipt."""

    instance: "_Instance | None" = None

    def receive_header(self, chain: int) -> bool:
        fresh = on_received_header_chain(self, chain)
        if fresh:
            hgt = self.env.gs.height[chain]
            cur = self.instance.header_tip.get(self.node_id, (0, GENESIS))
            if (hgt, -chain) > (cur[0], -cur[1]):
                self.instance.header_tip[self.node_id] = (hgt, chain)
        return fresh


def _instance_execution(params, part, corrupted, stream, id_stream) -> Execution:
    """Lottery among the instance's primaries, identities mapped to global ids."""
    bad = [i for i in part if i in corrupted]
    good = [i for i in part if i not in corrupted]
    local = params.with_(num_nodes=len(part), beta=len(bad) / len(part), parallel_m=1)
    base = sample_counts(local, stream)
    h = np.minimum(base.honest_counts, len(good))
    a = np.minimum(base.adversarial_counts, len(bad))
    leaders = {}
    for idx in np.flatnonzero(h + a):
        chosen = []
        if h[idx]:
            chosen += id_stream.choice(good, size=int(h[idx]), replace=False).tolist()
        if a[idx]:
            chosen += id_stream.choice(bad, size=int(a[idx]), replace=False).tolist()
        leaders[int(idx) + 1] = tuple(sorted(int(x) for x in chosen))
    return Execution(h, a, corrupted=frozenset(bad), leaders=leaders)


@dataclass
class ParallelResult:
    params: ProtocolParams
    assignment: ParallelAssignment
    honest_ids: list[int]
    merged: dict[int, MergedLedger]
    # Per slot, per instance: min over honest nodes of downloaded chain height.
    lengths: np.ndarray
    secondary_requests: int
    used: np.ndarray
    probe_instances: dict[int, set[int]] = field(default_factory=dict)
    merged_history: dict[int, list[MergedLedger]] = field(default_factory=dict)

    def committed_rate(self, node: int | None = None) -> float:
        """Honest committed blocks per slot after warmup, over the node's merged ledger."""
        nodes = self.honest_ids if node is None else [node]
        start = int(self.params.horizon * self.params.warmup_frac)
        rates = []
        for i in nodes:
            led = self.merged[i]
            if led.tmax <= start:
                rates.append(0.0)
                continue
            count = sum(1 for e in led.entries if e.slot > start)
            rates.append(count / (led.tmax - start))
        return min(rates)


class ParallelSimulation:
    def __init__(self, params: ProtocolParams, probe_interval: int = 0, record_history: bool = False):
        if params.adversary_id != "null":
            raise ConfigError("the parallel composition runs with the null adversary only")
        self.params = params
        streams = run_streams(params.seed)
        self.corrupted = choose_corrupted(params, streams["identities"])
        self.assignment = assign_primaries(params, streams["partition"])
        m = params.parallel_m
        self.budgets = envmod.BudgetLedger.for_nodes(params.num_nodes, params.budget_k)
        self.instances: list[_Instance] = []
        self.honest_ids = [i for i in range(params.num_nodes) if i not in self.corrupted]
        for j, part in enumerate(self.assignment.partition):
            ex = _instance_execution(params, part, self.corrupted, streams["lottery"], streams["identities"])
            inst = _Instance(j, ex, params, self.budgets)
            for i in self.honest_ids:
                view = LocalView(inst.gs, params.rule_id)
                if self.assignment.primary_of[i] == j:
                    st = NodeState(i, view, inst.env, params.rule_id, params.t_conf)
                else:
                    st = _Follower(i, view, inst.env, params.rule_id, params.t_conf)
                    st.instance = inst
                inst.env.attach(st)
                inst.states[i] = st
            self.instances.append(inst)
        self.now = 0
        self.probe_interval = probe_interval
        self._injected = [0] * m
        self._probe_count = 0
        self.probe_instances: dict[int, set[int]] = {}
        self._cum = [[0] for _ in range(m)]
        self.lengths = np.zeros((params.horizon + 1, m), dtype=np.int64)
        self.used = np.zeros((params.horizon + 1, len(self.honest_ids)), dtype=np.int64)
        self.secondary_requests = 0
        self.record_history = record_history
        self.history: dict[int, list[MergedLedger]] = {i: [] for i in self.honest_ids}

    def _cum_probe(self, j: int, block: int) -> int:
        cum = self._cum[j]
        inst = self.instances[j]
        if len(cum) <= block:
            par, content, reg = inst.gs.parent, inst.gs.content, inst.env.registry.probes
            for b in range(len(cum), block + 1):
                cum.append(cum[par[b]] | reg[content[b]])
        return cum[block]

    def _secondary_target(self, node: int, t: int) -> tuple[int, int] | None:
        """(instance, block): oldest Unknown block on a confirmed secondary header chain."""
        best = None
        cutoff = t - self.params.t_conf
        for inst in self.instances:
            if self.assignment.primary_of[node] == inst.index:
                continue
            st = inst.states[node]
            _, tip = inst.header_tip.get(node, (0, GENESIS))
            gs = inst.gs
            while tip != GENESIS and gs.slot[tip] > cutoff:
                tip = gs.parent[tip]
            code, front = st.view.walk(tip)
            if code != LIVE:
                continue
            key = (gs.slot[front], inst.index)
            if best is None or key < best[0]:
                best = (key, front)
        return None if best is None else (best[0][1], best[1])

    def step(self) -> None:
        t = self.now + 1
        params = self.params
        self.now = t
        self.budgets.reset()
        if self.probe_interval and t % self.probe_interval == 0:
            k = self._probe_count
            self._probe_count += 1
            self._injected[k % params.parallel_m] |= 1 << k
        for inst in self.instances:
            inst.env.now = t
            for i in inst.execution.leaders_at(t):
                st = inst.states.get(i)
                if st is None:
                    continue
                inj = self._injected[inst.index]
                pending = inj & ~self._cum_probe(inst.index, st.longest_downloaded) if inj else 0
                propose(st, t, pending)
            inst.env.deliver_pending()
        cap = params.download_cap or params.budget_k
        used = [0] * len(self.honest_ids)
        for _tick in range(params.budget_k):
            for idx, i in enumerate(self.honest_ids):
                if used[idx] >= cap:
                    continue
                pick = pc_download_tick(self, i, t)
                if pick is None:
                    continue
                j, block = pick
                if j != self.assignment.primary_of[i]:
                    self.secondary_requests += 1
                used[idx] += envmod.request_content(self.instances[j].env, i, block)
        self.used[t] = used
        for inst in self.instances:
            self.lengths[t, inst.index] = min(s.dc_height for s in inst.states.values())
        if self.record_history:
            for i in self.honest_ids:
                self.history[i].append(self.merged_for(i, t))

    def confirmed_chain(self, node: int, instance: int, t: int) -> list[tuple[int, int, int]]:
        inst = self.instances[instance]
        st = inst.states[node]
        tip = st.log_tip(t)
        gs = inst.gs
        return [(b, gs.slot[b], gs.height[b]) for b in st.dc_path[1 : gs.height[tip] + 1]]

    def merged_for(self, node: int, t: int | None = None) -> MergedLedger:
        t = self.now if t is None else t
        return merge_ledgers([self.confirmed_chain(node, j, t) for j in range(self.params.parallel_m)])

    def run(self) -> ParallelResult:
        while self.now < self.params.horizon:
            self.step()
        for inst in self.instances:
            reg = inst.env.registry.probes
            for b, c in enumerate(inst.gs.content):
                mask = reg[c]
                while mask:
                    low = mask & -mask
                    self.probe_instances.setdefault(low.bit_length() - 1, set()).add(inst.index)
                    mask ^= low
        return ParallelResult(
            params=self.params,
            assignment=self.assignment,
            honest_ids=list(self.honest_ids),
            merged={i: self.merged_for(i) for i in self.honest_ids},
            lengths=self.lengths,
            secondary_requests=self.secondary_requests,
            used=self.used,
            probe_instances=self.probe_instances,
            merged_history=self.history,
        )


def run_parallel(params: ProtocolParams, probe_interval: int = 0, record_history: bool = False) -> ParallelResult:
    return ParallelSimulation(params, probe_interval, record_history).run()


def pc_download_tick(sim: ParallelSimulation, node: int, t: int | None = None) -> tuple[int, int] | None:
    """Target of ``node``'s next tick as (instance, block): primary rule first, then the oldest confirmed gap."""
    t = sim.now if t is None else t
    prim = sim.instances[sim.assignment.primary_of[node]]
    target = RULES[sim.params.rule_id](prim.states[node].view)
    if target is not None:
        return prim.index, target
    return sim._secondary_target(node, t)
