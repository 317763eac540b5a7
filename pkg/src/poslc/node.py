"""Honest node state machine: receipt, deferred validation, proposals, ledger."""

from __future__ import annotations

from bisect import bisect_right
from collections.abc import Callable
from dataclasses import dataclass, field

from . import environment as envmod
from .headertree import GENESIS, extend, is_leader, verify
from .rules import DOWNLOADED, INVALID, RULES, UNKNOWN, LocalView, TieHook


@dataclass
class Hooks:
    """Adversary-controlled decisions a node defers to (``None`` = decline)."""

    download_tie: Callable[[int, list[int]], int] | None = None
    dc_tie: Callable[[int, list[int]], int] | None = None
    retain: Callable[[int, tuple[int, int], list[int]], int] | None = None


@dataclass
class NodeState:
    node_id: int
    view: LocalView
    env: envmod.Environment
    rule_id: str
    t_conf: int
    hooks: Hooks = field(default_factory=Hooks)
    longest_downloaded: int = GENESIS
    # Content parked until its header arrives / until its parent is Downloaded.
    deferred: dict[int, tuple[int, bool]] = field(default_factory=dict)
    waiting_on: dict[int, list[int]] = field(default_factory=dict)
    ledger_history: list[int] = field(default_factory=list)
    probe_inclusions: dict[int, int] = field(default_factory=dict)
    # Blocks of dC by height, and their slots, for O(log n) truncation.
    dc_path: list[int] = field(default_factory=lambda: [GENESIS])
    dc_slots: list[int] = field(default_factory=lambda: [0])
    relay: bool = True

    # Receiver protocol used by the environment.
    def receive_header(self, chain: int) -> bool:
        return on_received_header_chain(self, chain)

    def receive_content(self, chain: int, content_id: int, valid: bool) -> None:
        on_received_content(self, chain, content_id, valid)

    @property
    def dc_height(self) -> int:
        return len(self.dc_path) - 1

    def tie_hook(self) -> TieHook | None:
        if self.hooks.download_tie is None:
            return None
        node, hook = self.node_id, self.hooks.download_tie
        return lambda cands: hook(node, cands)

    def log_tip(self, t: int) -> int:
        """LOG_i(t): deepest block of dC with slot <= t - T_conf."""
        idx = bisect_right(self.dc_slots, t - self.t_conf) - 1
        return self.dc_path[max(idx, 0)]


def on_received_header_chain(state: NodeState, chain: int) -> bool:
    """Insert ``chain`` with its prefixes; True if anything was new."""
    status = state.view.status
    if chain < len(status) and status[chain]:
        return False
    if not 0 <= chain < len(state.env.gs.parent):
        return False
    new = state.view.insert_chain(chain)
    if not new:
        return False
    if state.relay:
        envmod.broadcast_header_chain(state.env, chain, state.node_id)
    if state.deferred:
        ready = [b for b in new if b in state.deferred]
        for b in ready:
            cid, valid = state.deferred.pop(b)
            _accept_content(state, b, cid, valid)
    return True


def on_received_content(state: NodeState, chain: int, content_id: int, valid: bool) -> None:
    gs = state.env.gs
    if not verify(gs, chain) or gs.content[chain] != content_id:
        return
    view = state.view
    if not view.knows(chain):
        state.deferred.setdefault(chain, (content_id, valid))
        return
    _accept_content(state, chain, content_id, valid)


def _accept_content(state: NodeState, chain: int, content_id: int, valid: bool) -> None:
    view = state.view
    status = view.status
    if status[chain] != UNKNOWN:
        return
    par = state.env.gs.parent
    if status[par[chain]] != DOWNLOADED:
        lst = state.waiting_on.setdefault(par[chain], [])
        if chain not in lst:
            lst.append(chain)
        state.deferred[chain] = (content_id, valid)
        return
    completed = []
    stack = [(chain, content_id, valid)]
    while stack:
        b, cid, ok = stack.pop()
        if status[b] != UNKNOWN:
            continue
        state.deferred.pop(b, None)
        view.mark(b, ok)
        if not ok:
            continue
        completed.append(b)
        envmod.upload_content(state.env, b, cid, True, state.env.now)
        for child in state.waiting_on.pop(b, ()):
            if child in state.deferred:
                stack.append((child, *state.deferred[child]))
    if completed:
        _update_dc(state, completed)


def _update_dc(state: NodeState, completed: list[int]) -> None:
    hgt = state.env.gs.height
    best = max(hgt[b] for b in completed)
    if best <= state.dc_height:
        return
    cands = sorted(b for b in completed if hgt[b] == best)
    pick = cands[0]
    if len(cands) > 1 and state.hooks.dc_tie is not None:
        pick = state.hooks.dc_tie(state.node_id, cands)
        if pick not in cands:
            raise RuntimeError("dc tie hook returned a non-candidate")
    set_longest_downloaded(state, pick)


def set_longest_downloaded(state: NodeState, tip: int) -> None:
    gs = state.env.gs
    par, hgt, slot = gs.parent, gs.height, gs.slot
    path, slots = state.dc_path, state.dc_slots
    suffix = []
    b = tip
    while hgt[b] >= len(path) or path[hgt[b]] != b:
        suffix.append(b)
        b = par[b]
    cut = hgt[b] + 1
    del path[cut:]
    del slots[cut:]
    for x in reversed(suffix):
        path.append(x)
        slots.append(slot[x])
    state.longest_downloaded = tip


def propose(state: NodeState, t: int, probes: int = 0) -> int | None:
    """Extend dC if this node leads slot ``t``; returns the new block."""
    env = state.env
    if not is_leader(env.gs, state.node_id, t):
        return None
    cid = env.registry.new(True, probes)
    block = extend(env.gs, state.node_id, t, state.longest_downloaded, cid, now=t)
    if block is None:
        return None
    state.view.insert_chain(block)
    state.view.mark(block, True)
    set_longest_downloaded(state, block)
    envmod.upload_content(env, block, cid, True, t)
    envmod.broadcast_header_chain(env, block, state.node_id)
    return block


def next_request(state: NodeState) -> int | None:
    return RULES[state.rule_id](state.view, state.tie_hook())


def download_tick(state: NodeState) -> tuple[int | None, bool, bool]:
    """One download tick: (requested block, delivered, delivered-invalid)."""
    target = next_request(state)
    if target is None:
        return None, False, False
    ok = envmod.request_content(state.env, state.node_id, target)
    bad = ok and state.view.status[target] == INVALID
    return target, ok, bad


def record_ledger(state: NodeState, t: int) -> int:
    tip = state.log_tip(t)
    state.ledger_history.append(tip)
    return tip


def slot_tick(state: NodeState, t: int, probes: int = 0) -> dict[str, int]:
    """A whole slot for one node in isolation: propose, K ticks, record LOG.

    The engine interleaves nodes and the adversary at tick granularity; this
    helper is the single-node composition of the same steps.
    """
    env = state.env
    env.now = t
    produced = propose(state, t, probes)
    env.budgets.remaining[state.node_id] = env.budgets.budget_k
    used = wasted = idle = 0
    for _ in range(env.budgets.budget_k):
        target, ok, bad = download_tick(state)
        if ok:
            used += 1
            wasted += bad
        else:
            idle += 1
    record_ledger(state, t)
    return {"proposed": -1 if produced is None else produced, "used": used, "wasted": wasted, "idle": idle}
