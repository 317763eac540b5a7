"""Adversary strategies.

``SpamEquivocation`` is the invalid-content spam attack: on top of the honest
nodes' common prefix b0 it builds chains

    b0 <- b_i (invalid content, uploaded) <- B_i,2 <- ... <- B_i,k (withheld)

from its own production opportunities, minting a fresh chain whenever the
previous one has been seen by the current target. The target's rule ranks the
spam chain at or above every alternative, the tie hook hands the win to the
spam, and the target burns a download on b_i. Opportunities are reused across
chains, which the header functionality allows.

``PrivateWithhold`` grows a withheld valid chain and releases it to a target
once it is strictly longer than the target's downloaded chain.
``SpamThenFork`` combines both and releases to everyone at once, once the
private chain beats every honest chain and some honest ledger already holds
a block the private branch would revert.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

from . import environment as envmod
from .headertree import GENESIS, extend, is_prefix
from .node import Hooks, NodeState
from .rules import BLOCKLISTING, FILTERED_RULES, FRESHEST, LONGEST, top_key

if TYPE_CHECKING:
    from .engine import Simulation


@dataclass
class AdversaryState:
    strategy_id: str
    corrupted: frozenset[int]
    # All (slot, node) wins of corrupted nodes up to the current slot.
    opportunity_bank: list[tuple[int, int]] = field(default_factory=list)
    private_chains: list[int] = field(default_factory=list)
    # Spam chains minted in the current slot, keyed by the opportunities used.
    spam_generators: dict[tuple, list[int]] = field(default_factory=dict)
    spam_total: int = 0
    released: set[int] = field(default_factory=set)


class Adversary:
    strategy_id = "null"
    passive = True

    def __init__(self, corrupted: frozenset[int]):
        self.state = AdversaryState(self.strategy_id, frozenset(corrupted))
        self.sim: Simulation | None = None
        self.events: list[str] = []

    def bind(self, sim: "Simulation") -> None:
        self.sim = sim

    def hooks(self) -> Hooks:
        return Hooks()

    def on_phase1(self, t: int) -> None:
        pass

    def on_tick(self, node: int, tick_index: int) -> bool:
        """Act before ``node``'s download tick; True if anything was pushed."""
        return False

    def take_events(self) -> list[str]:
        out, self.events = self.events, []
        return out


class NullAdversary(Adversary):
    """Declines every hook; corrupted leaders never propose."""


class _Active(Adversary):
    passive = False

    def __init__(self, corrupted: frozenset[int]):
        super().__init__(corrupted)
        self._bank_slots: list[int] = []
        self._slot_leader: dict[int, int] = {}
        self._owned: set[int] = set()
        self._spam_tips: set[int] = set()
        self.b0 = GENESIS

    # -- hooks -----------------------------------------------------------

    def hooks(self) -> Hooks:
        return Hooks(download_tie=self._download_tie, dc_tie=self._dc_tie, retain=self._retain)

    def _prefer_own(self, cands: list[int], prefer: set[int]) -> int:
        mine = [c for c in cands if c in prefer]
        if mine:
            return max(mine)
        mine = [c for c in cands if c in self._owned]
        return max(mine) if mine else min(cands)

    def _download_tie(self, node: int, cands: list[int]) -> int:
        return self._prefer_own(cands, self._spam_tips)

    def _dc_tie(self, node: int, cands: list[int]) -> int:
        return self._prefer_own(cands, set(self.state.private_chains))

    def _retain(self, node: int, opp: tuple[int, int], leaves: list[int]) -> int:
        hgt, spam = self.sim.gs.height, self._spam_tips
        best = max([(hgt[b], b) for b in leaves if b in spam], default=None)
        return min(leaves) if best is None else best[1]

    # -- bookkeeping -----------------------------------------------------

    def on_phase1(self, t: int) -> None:
        sim = self.sim
        bad = [i for i in sim.execution.leaders_at(t) if i in self.state.corrupted]
        for node in bad:
            self.state.opportunity_bank.append((t, node))
        if bad:
            self._bank_slots.append(t)
            self._slot_leader[t] = bad[0]
        self.state.spam_generators = {}
        self.b0 = sim.common_prefix()
        self._act_phase1(t)

    def _act_phase1(self, t: int) -> None:
        pass

    def _opportunities_after(self, slot: int) -> list[int]:
        """Distinct slots with a corrupted leader in (slot, now]."""
        i = bisect_right(self._bank_slots, slot)
        return self._bank_slots[i:]

    def _mint(self, slots: list[int], tip_opp: tuple[int, int], invalid_first: bool = True) -> int:
        """Build b0 <- slots... <- tip_opp; first block invalid and uploaded."""
        sim = self.sim
        gs, env = sim.gs, sim.env
        parent = self.b0
        plan = [(s, self._slot_leader[s]) for s in slots] + [tip_opp]
        for idx, (slot, node) in enumerate(plan):
            invalid = invalid_first and idx == 0
            cid = env.registry.new(not invalid)
            blk = extend(gs, node, slot, parent, cid, now=sim.now)
            if blk is None:
                raise RuntimeError(f"adversary built an illegal chain at ({node}, {slot})")
            self._owned.add(blk)
            if invalid:
                envmod.upload_content(env, blk, cid, False, sim.now)
            parent = blk
        return parent


class SpamEquivocation(_Active):
    strategy_id = "spam-equivocation"

    def __init__(self, corrupted: frozenset[int]):
        super().__init__(corrupted)
        self.onset: int | None = None
        self._armed = False

    def _act_phase1(self, t: int) -> None:
        self._armed = bool(self._opportunities_after(self.sim.gs.slot[self.b0]))

    def _plan(self, target: NodeState) -> tuple[list[int], tuple[int, int]] | None:
        sim = self.sim
        gs = sim.gs
        h0 = gs.height[self.b0]
        slots = self._opportunities_after(gs.slot[self.b0])
        if not slots:
            return None
        best = top_key(target.view)
        rule = sim.params.rule_id
        if rule == FRESHEST:
            tip_slot = slots[-1]
            if best is not None and tip_slot < best:
                return None
            body = slots[-2:-1]
            return body, (tip_slot, self._slot_leader[tip_slot])
        need = 2 if best is None else max(2, best - h0)
        if rule == LONGEST:
            use = slots[-need:]
            if best is not None and h0 + len(use) < best:
                return None
            return use[:-1], (use[-1], self._slot_leader[use[-1]])
        # Filtered rules: the tip needs an opportunity nobody retained yet.
        view = target.view
        tip = None
        for opp in reversed(self.state.opportunity_bank):
            if opp[0] <= gs.slot[self.b0]:
                break
            key = (opp[1], opp[0])
            if key in view.retained_opps:
                continue
            if rule == BLOCKLISTING and opp[1] in view.blocklist:
                continue
            tip = opp
            break
        if tip is None:
            return None
        i = bisect_right(slots, tip[0] - 1)
        body = slots[:i][-(need - 1):] if need > 1 else []
        if best is not None and h0 + len(body) + 1 < best:
            return None
        return body, tip

    def _spam(self, target: NodeState) -> bool:
        plan = self._plan(target)
        if plan is None:
            return False
        body, tip_opp = plan
        # Bodies are runs of consecutive banked slots, so first slot and length
        # identify them.
        key = (body[0] if body else -1, len(body), tip_opp)
        minted = self.state.spam_generators.setdefault(key, [])
        tip = minted[-1] if minted else None
        if tip is None or target.view.knows(tip):
            tip = self._mint(body, tip_opp)
            minted.append(tip)
            self._spam_tips.add(tip)
            self.state.spam_total += 1
            if self.onset is None:
                self.onset = self.sim.now
                self.events.append("spam-onset")
        return envmod.adversary_push(self.sim.env, target.node_id, tip)

    def on_tick(self, node: int, tick_index: int) -> bool:
        return self._armed and self._spam(self.sim.node_by_id[node])

    def take_events(self) -> list[str]:
        n = sum(len(v) for v in self.state.spam_generators.values())
        out = super().take_events()
        if n:
            out.append(f"spam={n}")
        return out


class _PrivateMixin:
    """Withheld valid chain, rebased on the common prefix when overtaken."""

    def _grow_private(self, t: int) -> None:
        sim = self.sim
        gs = sim.gs
        st = self.state
        tip = st.private_chains[-1] if st.private_chains else GENESIS
        if gs.height[tip] <= gs.height[self.b0]:
            tip = self.b0
        node = self._slot_leader.get(t)
        if node is not None and gs.slot[tip] < t:
            cid = sim.env.registry.new(True)
            blk = extend(gs, node, t, tip, cid, now=t)
            if blk is None:
                raise RuntimeError("private extension rejected")
            self._owned.add(blk)
            tip = blk
        if not st.private_chains or st.private_chains[-1] != tip:
            st.private_chains.append(tip)

    def _release_to(self, node: NodeState) -> None:
        sim = self.sim
        gs, env = sim.gs, sim.env
        tip = self.state.private_chains[-1]
        envmod.adversary_push(env, node.node_id, tip)
        for b in gs.path(tip)[1:]:
            if b in self._owned:
                cid = gs.content[b]
                valid = env.registry.valid[cid]
                envmod.upload_content(env, b, cid, valid, sim.now)
                envmod.adversary_push(env, node.node_id, b, (cid, valid))
        if tip not in self.state.released:
            self.state.released.add(tip)
            self.events.append(f"release={tip}")


class PrivateWithhold(_PrivateMixin, _Active):
    strategy_id = "private-withhold"

    def _act_phase1(self, t: int) -> None:
        self._grow_private(t)

    def on_tick(self, node: int, tick_index: int) -> bool:
        tip = self.state.private_chains[-1]
        if tip == GENESIS:
            return False
        target = self.sim.node_by_id[node]
        if tip in self._owned and self.sim.gs.height[tip] > target.dc_height and not target.view.knows(tip):
            self._release_to(target)
            return True
        return False


class SpamThenFork(_PrivateMixin, SpamEquivocation):
    strategy_id = "spam-then-fork"

    def _act_phase1(self, t: int) -> None:
        SpamEquivocation._act_phase1(self, t)
        self._grow_private(t)
        tip = self.state.private_chains[-1]
        if tip == GENESIS or tip not in self._owned or tip in self.state.released:
            return
        nodes, gs = self.sim.nodes, self.sim.gs
        if not nodes or not all(gs.height[tip] > n.dc_height for n in nodes):
            return
        # Releasing before some honest ledger holds a block off the private
        # branch only hands the honest nodes a longer chain; keep waiting.
        if all(is_prefix(gs, n.log_tip(t), tip) for n in nodes):
            return
        for n in nodes:
            self._release_to(n)


STRATEGIES = {
    "null": NullAdversary,
    "spam-equivocation": SpamEquivocation,
    "private-withhold": PrivateWithhold,
    "spam-then-fork": SpamThenFork,
}


def make_adversary(strategy_id: str, corrupted: frozenset[int]) -> Adversary:
    try:
        cls = STRATEGIES[strategy_id]
    except KeyError:
        raise ValueError(f"unknown adversary strategy {strategy_id!r}") from None
    return cls(corrupted)


def on_phase1(adv: Adversary, t: int) -> None:
    adv.on_phase1(t)


def on_tick(adv: Adversary, node: int, tick_index: int) -> bool:
    return adv.on_tick(node, tick_index)
