"""Download rules and the per-node local view they operate on.

Content status codes (``LocalView.status``):

    0  header not in this node's tree
    1  header known, content Unknown
    2  Downloaded with valid content
    3  Invalid content

Content is processed only after every ancestor is Downloaded, so every chain
in a view has the shape ``D+ [I] U*``: a downloaded prefix, at most one
invalid block, then unknown blocks. A walk from a tip towards genesis
therefore finds either the earliest Unknown block, the fully downloaded
state, or an Invalid ancestor; ``LocalView.walk`` implements that walk and
memoises dead (invalid-prefixed) blocks.

Each rule function takes an optional ``tie`` callable that receives the list
of tied candidate chains and returns one of them. When ``tie`` is ``None`` the
lowest block id wins. Views built for a rule keep an incremental index; the
same functions fall back to a direct scan for views built for another rule,
and the ``reference_*`` functions always scan.
"""

from __future__ import annotations

import heapq
from collections.abc import Callable
from enum import Enum

from .headertree import GENESIS, GlobalHeaderSet

UNSEEN, UNKNOWN, DOWNLOADED, INVALID = 0, 1, 2, 3

# Outcomes of LocalView.walk.
LIVE, COMPLETE, DEAD = 0, 1, 2

FRESHEST = "freshest"
LONGEST = "longest-header"
EQUIVOCATION_AVOIDANCE = "equivocation-avoidance"
BLOCKLISTING = "blocklisting"
FILTERED_RULES = (EQUIVOCATION_AVOIDANCE, BLOCKLISTING)

TieHook = Callable[[list[int]], int]
RetainHook = Callable[[tuple[int, int], list[int]], int]


class ContentStatus(Enum):
    Unknown = UNKNOWN
    Downloaded = DOWNLOADED
    Invalid = INVALID


class LocalView:
    """A node's header tree, content status, blocklist and slot filter."""

    def __init__(self, gs: GlobalHeaderSet, rule_id: str = FRESHEST):
        self.gs = gs
        self.rule_id = rule_id
        self.filtered = rule_id in FILTERED_RULES
        self.status = bytearray([DOWNLOADED])
        self.dead = bytearray(1)
        self.blocklist: set[int] = set()
        # Equivocation tracking feeds the blocklist; other rules skip it.
        self.track_equivocations = rule_id == BLOCKLISTING
        self.first_of_opp: dict[tuple[int, int], int] = {}
        self.num_known = 1
        self._frontier_cache: dict[int, int] = {}
        # Freshest / longest-header index: lazy max-heap over (key, id).
        self._heap: list[tuple[int, int]] = []
        self._in_heap = bytearray(1)
        # Filter state for equivocation-avoidance and blocklisting.
        self.has_child = bytearray(1)
        self.open_leaves: set[int] = set()
        self.retained: set[int] = set()
        self.retained_opps: set[tuple[int, int]] = set()
        self.filter_slot = -1
        self._eheap: list[tuple[int, int]] = []
        self._in_eheap: set[int] = set()
        if not self.filtered:
            self._push(GENESIS)

    # -- storage ---------------------------------------------------------

    def _grow(self) -> None:
        extra = len(self.gs.parent) - len(self.status)
        if extra > 0:
            pad = bytes(extra + 64)
            self.status += pad
            self.dead += pad
            self._in_heap += pad
            self.has_child += pad

    def knows(self, block: int) -> bool:
        return block < len(self.status) and self.status[block] != UNSEEN

    def content_status(self, block: int) -> ContentStatus | None:
        if not self.knows(block):
            return None
        return ContentStatus(self.status[block])

    @property
    def header_tree(self) -> list[int]:
        return [b for b in range(min(len(self.status), len(self.gs.parent))) if self.status[b]]

    @property
    def slot_filtered_tree(self) -> frozenset[int]:
        return frozenset(self.retained)

    def _key(self, block: int) -> int:
        if self.rule_id == FRESHEST:
            return self.gs.slot[block]
        return self.gs.height[block]

    def _push(self, block: int) -> None:
        if not self._in_heap[block]:
            self._in_heap[block] = 1
            heapq.heappush(self._heap, (-self._key(block), block))

    # -- updates ---------------------------------------------------------

    def insert_chain(self, tip: int) -> list[int]:
        """Add ``tip`` and its unseen prefixes; return new ids, oldest first."""
        self._grow()
        status = self.status
        if status[tip]:
            return []
        par = self.gs.parent
        new = []
        b = tip
        while not status[b]:
            new.append(b)
            b = par[b]
        new.reverse()
        gs_slot, gs_prod = self.gs.slot, self.gs.producer
        # New blocks are all Unknown, so dead-ness is inherited from the
        # known parent of the oldest one.
        p0 = par[new[0]]
        inherit = self.dead[p0] or status[p0] == INVALID
        for x in new:
            status[x] = UNKNOWN
        if inherit:
            dead = self.dead
            for x in new:
                dead[x] = 1
        if self.track_equivocations:
            first = self.first_of_opp
            for x in new:
                opp = (gs_prod[x], gs_slot[x])
                if opp in first:
                    self.blocklist.add(gs_prod[x])
                else:
                    first[opp] = x
        if self.filtered:
            self.has_child[p0] = 1
            self.open_leaves.discard(p0)
            for x in new[:-1]:
                self.has_child[x] = 1
        self.num_known += len(new)
        if self.filtered:
            if not inherit:
                self.open_leaves.add(tip)
                opp = (gs_prod[tip], gs_slot[tip])
                if self.filter_slot >= 0 and opp not in self.retained_opps:
                    self.retained.add(tip)
                    self.retained_opps.add(opp)
                    self._epush(tip)
        else:
            self._push(tip)
        return new

    def mark(self, block: int, valid: bool) -> None:
        """Record processed content for ``block`` (prefix already Downloaded)."""
        self.status[block] = DOWNLOADED if valid else INVALID
        if not valid:
            self.dead[block] = 1
            if not self.filtered:
                self._push(self.gs.parent[block])

    # -- queries ---------------------------------------------------------

    def walk(self, tip: int) -> tuple[int, int]:
        """Classify chain ``tip``: (LIVE, earliest Unknown) / (COMPLETE, tip) / (DEAD, -1)."""
        status, dead, par = self.status, self.dead, self.gs.parent
        if dead[tip]:
            return DEAD, -1
        s = status[tip]
        if s == DOWNLOADED:
            return COMPLETE, tip
        # Blocks above the frontier stay Unknown until the frontier itself is
        # processed, so a cached frontier is current while it is Unknown.
        f = self._frontier_cache.get(tip)
        if f is not None:
            s = status[f]
            if s == UNKNOWN:
                return LIVE, f
            if s == INVALID:
                dead[tip] = 1
                return DEAD, -1
        seen = []
        x = tip
        while True:
            s = status[x]
            if s == DOWNLOADED:
                self._frontier_cache[tip] = seen[-1]
                return LIVE, seen[-1]
            if s == INVALID or dead[x]:
                for y in seen:
                    dead[y] = 1
                return DEAD, -1
            seen.append(x)
            x = par[x]

    # -- slot filter -----------------------------------------------------

    def _epush(self, block: int) -> None:
        if block not in self._in_eheap:
            self._in_eheap.add(block)
            heapq.heappush(self._eheap, (-self.gs.height[block], block))

    def refresh_filter(self, slot: int, choose: RetainHook | None = None) -> None:
        """Keep one open leaf per production opportunity for this slot.

        Only open leaves (live, tip Unknown) enter the grouping; a leaf that
        is dead or fully downloaded can never become a candidate again.
        """
        gs_slot, gs_prod = self.gs.slot, self.gs.producer
        status, dead, cache = self.status, self.dead, self._frontier_cache
        groups: dict[tuple[int, int], list[int]] = {}
        gone = []
        for leaf in self.open_leaves:
            # Inline fast path of walk(): a cached frontier that is still Unknown.
            f = cache.get(leaf)
            if f is None or dead[leaf] or status[f] != UNKNOWN:
                if self.walk(leaf)[0] != LIVE:
                    gone.append(leaf)
                    continue
            opp = (gs_prod[leaf], gs_slot[leaf])
            grp = groups.get(opp)
            if grp is None:
                groups[opp] = [leaf]
            else:
                grp.append(leaf)
        self.open_leaves.difference_update(gone)
        self.retained = set()
        self.retained_opps = set()
        self._eheap = []
        self._in_eheap = set()
        for opp in sorted(groups):
            leaves = groups[opp]
            if len(leaves) == 1:
                pick = leaves[0]
            else:
                leaves.sort()
                pick = leaves[0]
                if choose is not None:
                    pick = choose(opp, leaves)
                    if pick not in leaves:
                        raise RuntimeError("retain hook returned a leaf outside its group")
            self.retained.add(pick)
            self.retained_opps.add(opp)
            self._epush(pick)
        self.filter_slot = slot


# -- production selection ------------------------------------------------


def _settle_tie(live: list[int], tie: TieHook | None) -> int:
    if len(live) == 1 or tie is None:
        return min(live)
    pick = tie(sorted(live))
    if pick not in live:
        raise RuntimeError("tie hook returned a non-candidate")
    return pick


def _heap_top(view: LocalView, tie: TieHook | None) -> int | None:
    """Tip of the max-key candidate chain (dead entries dropped for good)."""
    heap = view._heap
    while heap:
        code, _ = view.walk(heap[0][1])
        if code != DEAD:
            break
        heapq.heappop(heap)
    if not heap:
        return None
    if tie is None:
        return heap[0][1]
    key = heap[0][0]
    live = []
    while heap and heap[0][0] == key:
        _, b = heapq.heappop(heap)
        if view.walk(b)[0] == DEAD:
            continue
        live.append(b)
    for b in live:
        heapq.heappush(heap, (key, b))
    return _settle_tie(live, tie)


def _filtered_top(view: LocalView, tie: TieHook | None, use_blocklist: bool) -> int | None:
    heap = view._eheap
    par, prod = view.gs.parent, view.gs.producer
    status = view.status

    def admissible(b: int) -> bool:
        if view.walk(b)[0] != LIVE or status[b] != UNKNOWN:
            return False
        if use_blocklist and prod[b] in view.blocklist:
            p = par[b]
            if status[p] == UNKNOWN:
                view._epush(p)
            return False
        return True

    while heap:
        if admissible(heap[0][1]):
            break
        heapq.heappop(heap)
    if not heap:
        return None
    if tie is None:
        return heap[0][1]
    key = heap[0][0]
    live = []
    while heap and heap[0][0] == key:
        _, b = heapq.heappop(heap)
        if admissible(b):
            live.append(b)
    for b in live:
        heapq.heappush(heap, (key, b))
    return _settle_tie(live, tie)


def _frontier(view: LocalView, chain: int | None) -> int | None:
    if chain is None:
        return None
    code, block = view.walk(chain)
    return block if code == LIVE else None


def select_chain(view: LocalView, rule_id: str, tie: TieHook | None = None) -> int | None:
    """Tip of the chain the rule prioritises (may be fully downloaded)."""
    if rule_id != view.rule_id:
        return reference_select_chain(view, rule_id, tie)
    if view.filtered:
        return _filtered_top(view, tie, rule_id == BLOCKLISTING)
    return _heap_top(view, tie)


def top_key(view: LocalView) -> int | None:
    """Priority key of the view's best candidate under its own rule."""
    chain = select_chain(view, view.rule_id)
    if chain is None:
        return None
    return view._key(chain) if not view.filtered else view.gs.height[chain]


def freshest_block(view: LocalView, tie: TieHook | None = None) -> int | None:
    return _frontier(view, select_chain(view, FRESHEST, tie))


def longest_header_chain(view: LocalView, tie: TieHook | None = None) -> int | None:
    return _frontier(view, select_chain(view, LONGEST, tie))


def equivocation_avoidance(view: LocalView, tie: TieHook | None = None) -> int | None:
    return _frontier(view, select_chain(view, EQUIVOCATION_AVOIDANCE, tie))


def blocklisting(view: LocalView, tie: TieHook | None = None) -> int | None:
    return _frontier(view, select_chain(view, BLOCKLISTING, tie))


RULES: dict[str, Callable[[LocalView, TieHook | None], int | None]] = {
    FRESHEST: freshest_block,
    LONGEST: longest_header_chain,
    EQUIVOCATION_AVOIDANCE: equivocation_avoidance,
    BLOCKLISTING: blocklisting,
}


# -- reference scans -----------------------------------------------------


def _path_state(view: LocalView, block: int) -> int:
    """Walk the whole path from scratch (no memo): LIVE, COMPLETE or DEAD."""
    status, par = view.status, view.gs.parent
    complete = True
    x = block
    while x >= 0:
        s = status[x]
        if s == INVALID:
            return DEAD
        if s != DOWNLOADED:
            complete = False
        x = par[x]
    return COMPLETE if complete else LIVE


def reference_candidates(view: LocalView, rule_id: str) -> set[int]:
    """Every chain the rule may choose from, by direct definition."""
    known = view.header_tree
    if rule_id in (FRESHEST, LONGEST):
        return {b for b in known if _path_state(view, b) != DEAD}
    closure: set[int] = set()
    par = view.gs.parent
    for leaf in view.retained:
        x = leaf
        while x >= 0 and x not in closure:
            closure.add(x)
            x = par[x]
    out = {
        c
        for c in closure
        if view.status[c] == UNKNOWN and _path_state(view, c) != DEAD
    }
    if rule_id == BLOCKLISTING:
        prod = view.gs.producer
        out = {c for c in out if prod[c] not in view.blocklist}
    return out


def reference_select_chain(view: LocalView, rule_id: str, tie: TieHook | None = None) -> int | None:
    cands = reference_candidates(view, rule_id)
    if not cands:
        return None
    if rule_id == FRESHEST:
        keyf = view.gs.slot
    else:
        keyf = view.gs.height
    best = max(keyf[c] for c in cands)
    return _settle_tie([c for c in cands if keyf[c] == best], tie)


def reference_frontier(view: LocalView, chain: int | None) -> int | None:
    """Earliest Unknown block of ``chain`` by a full path scan."""
    if chain is None:
        return None
    path = view.gs.path(chain)
    for b in path:
        if view.status[b] != DOWNLOADED:
            return b if view.status[b] == UNKNOWN else None
    return None


def reference_rule(view: LocalView, rule_id: str, tie: TieHook | None = None) -> int | None:
    return reference_frontier(view, reference_select_chain(view, rule_id, tie))
