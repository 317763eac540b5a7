"""Network environment: header dissemination, the content repository and budgets.

Slot structure: in phase 1 honest proposals are broadcast and the adversary
acts; the pending broadcast set is then delivered to every honest node before
any download tick. Relays made during phase 2 are delivered at the next
slot's phase 1. The adversary can bypass the schedule with ``adversary_push``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

from .headertree import GENESIS, GlobalHeaderSet, verify


class Receiver(Protocol):
    node_id: int

    def receive_header(self, chain: int) -> bool: ...

    def receive_content(self, chain: int, content_id: int, valid: bool) -> None: ...


@dataclass
class ContentRegistry:
    """Every content object ever created: validity bit and attached probe mask."""

    valid: list[bool] = field(default_factory=lambda: [True])
    probes: list[int] = field(default_factory=lambda: [0])

    def new(self, valid: bool, probes: int = 0) -> int:
        self.valid.append(bool(valid))
        self.probes.append(probes)
        return len(self.valid) - 1


@dataclass
class Repository:
    contents: dict[int, tuple[int, bool, int]] = field(default_factory=dict)

    def __contains__(self, chain: int) -> bool:
        return chain in self.contents


@dataclass
class DeliverySchedule:
    pending_headers: list[tuple[int, int]] = field(default_factory=list)
    _queued: set[int] = field(default_factory=set)
    delivered_all: set[int] = field(default_factory=set)

    def enqueue(self, chain: int, origin: int) -> None:
        if chain in self._queued or chain in self.delivered_all:
            return
        self._queued.add(chain)
        self.pending_headers.append((chain, origin))

    def drain(self) -> list[tuple[int, int]]:
        out = self.pending_headers
        self.pending_headers = []
        self._queued.clear()
        return out


@dataclass
class BudgetLedger:
    budget_k: int
    remaining: list[int]

    @classmethod
    def for_nodes(cls, num_nodes: int, budget_k: int) -> "BudgetLedger":
        return cls(budget_k, [budget_k] * num_nodes)

    def reset(self) -> None:
        self.remaining = [self.budget_k] * len(self.remaining)


class Environment:
    def __init__(self, gs: GlobalHeaderSet, num_nodes: int, budget_k: int):
        self.gs = gs
        self.registry = ContentRegistry()
        self.repo = Repository()
        self.repo.contents[GENESIS] = (0, True, 0)
        self.schedule = DeliverySchedule()
        self.budgets = BudgetLedger.for_nodes(num_nodes, budget_k)
        self.receivers: dict[int, Receiver] = {}
        self.now = 0
        # Observers the adversary can read: every broadcast seen, in order.
        self.broadcast_log: list[int] = []

    def attach(self, receiver: Receiver) -> None:
        self.receivers[receiver.node_id] = receiver

    def deliver_pending(self) -> None:
        """Phase-1 delivery of every queued broadcast to every honest node."""
        for chain, _origin in self.schedule.drain():
            # Marked first so that relays triggered below are dropped.
            self.schedule.delivered_all.add(chain)
            for r in self.receivers.values():
                r.receive_header(chain)


def broadcast_header_chain(env: Environment, chain: int, origin: int) -> bool:
    if not 0 <= chain < len(env.gs.parent):
        return False
    env.broadcast_log.append(chain)
    env.schedule.enqueue(chain, origin)
    return True


def upload_content(env: Environment, chain: int, content_id: int, valid: bool, slot: int) -> bool:
    if not verify(env.gs, chain) or env.gs.content[chain] != content_id:
        return False
    if chain not in env.repo.contents:
        env.repo.contents[chain] = (content_id, bool(valid), slot)
    return True


def request_content(env: Environment, node: int, chain: int) -> bool:
    """Deliver ``chain``'s content to ``node`` if stored and budget remains."""
    entry = env.repo.contents.get(chain)
    if entry is None or env.budgets.remaining[node] <= 0:
        return False
    env.budgets.remaining[node] -= 1
    content_id, valid, _ = entry
    env.receivers[node].receive_content(chain, content_id, valid)
    return True


def adversary_push(env: Environment, node: int, chain: int, content: tuple[int, bool] | None = None) -> bool:
    """Immediate header (``content is None``) or content push, free of budget."""
    if not 0 <= chain < len(env.gs.parent):
        return False
    r = env.receivers[node]
    if content is None:
        r.receive_header(chain)
        return True
    content_id, valid = content
    if env.gs.content[chain] != content_id:
        return False
    r.receive_content(chain, content_id, valid)
    return True
