"""The global header-chain functionality: leadership, extension and validity.

Chains are identified by the integer id of their tip block. Ids are assigned
in creation order, so a parent always has a smaller id than its children and
genesis is id 0. Block data lives in parallel lists on ``GlobalHeaderSet`` so
that hot loops can index them directly.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .lottery import Execution

GENESIS = 0
GENESIS_PRODUCER = "genesis"


@dataclass(frozen=True)
class BlockHeader:
    id: int
    slot: int
    producer: int | str
    content_hash: int
    parent: int | None
    height: int


class Relation(Enum):
    A_PREFIX_OF_B = "a<=b"  # also returned for a == b, where both directions hold
    B_PREFIX_OF_A = "b<=a"
    INCOMPARABLE = "incomparable"


class GlobalHeaderSet:
    """Set of every header chain ever created, plus the leader lottery memo.

    ``execution`` fixes the leader sets; ``is_leader`` memoises the answers in
    ``lottery_memo`` so repeated queries are stable by construction.
    """

    def __init__(self, execution: Execution, num_nodes: int):
        if execution.leaders is None:
            raise ValueError("header set needs an execution with leader identities")
        self.execution = execution
        self.num_nodes = num_nodes
        self.lottery_memo: dict[tuple[int, int], bool] = {}
        self.parent: list[int] = [-1]
        self.slot: list[int] = [0]
        self.producer: list[int] = [-1]
        self.height: list[int] = [0]
        self.content: list[int] = [0]
        self._index: dict[tuple[int, int, int, int], int] = {}

    def __len__(self) -> int:
        return len(self.parent)

    @property
    def valid_chains(self) -> range:
        return range(len(self.parent))

    def header(self, block: int) -> BlockHeader:
        prod = self.producer[block]
        return BlockHeader(
            id=block,
            slot=self.slot[block],
            producer=GENESIS_PRODUCER if prod < 0 else prod,
            content_hash=self.content[block],
            parent=None if block == GENESIS else self.parent[block],
            height=self.height[block],
        )

    def path(self, tip: int) -> list[int]:
        """Block ids from genesis to ``tip`` inclusive."""
        out = []
        b = tip
        while b >= 0:
            out.append(b)
            b = self.parent[b]
        out.reverse()
        return out

    def ancestor_at_height(self, block: int, height: int) -> int:
        par, hgt = self.parent, self.height
        while hgt[block] > height:
            block = par[block]
        return block


def is_leader(gs: GlobalHeaderSet, node: int, slot: int) -> bool:
    key = (node, slot)
    bit = gs.lottery_memo.get(key)
    if bit is None:
        if not 0 <= node < gs.num_nodes or slot < 1 or slot > gs.execution.horizon:
            bit = False
        else:
            bit = node in gs.execution.leaders_at(slot)
        gs.lottery_memo[key] = bit
    return bit


def extend(
    gs: GlobalHeaderSet,
    producer: int,
    slot_claimed: int,
    parent: int,
    content_hash: int,
    now: int,
) -> int | None:
    """Register a child of ``parent``; ``None`` when a guard fails.

    Identical requests return the already registered chain rather than a
    duplicate, so only distinct (parent, content) pairs create equivocations.
    """
    if not 0 <= parent < len(gs.parent):
        return None
    if not gs.slot[parent] < slot_claimed <= now:
        return None
    if not is_leader(gs, producer, slot_claimed):
        return None
    key = (producer, slot_claimed, parent, content_hash)
    existing = gs._index.get(key)
    if existing is not None:
        return existing
    block = len(gs.parent)
    gs.parent.append(parent)
    gs.slot.append(slot_claimed)
    gs.producer.append(producer)
    gs.height.append(gs.height[parent] + 1)
    gs.content.append(content_hash)
    gs._index[key] = block
    return block


def verify(gs: GlobalHeaderSet, chain) -> bool:
    """True iff ``chain`` was created by this functionality.

    Accepts a block id or a ``BlockHeader``; a header is valid only if every
    field matches the registered block.
    """
    if isinstance(chain, BlockHeader):
        return (
            isinstance(chain.id, int)
            and 0 <= chain.id < len(gs.parent)
            and chain == gs.header(chain.id)
        )
    return isinstance(chain, int) and not isinstance(chain, bool) and 0 <= chain < len(gs.parent)


def is_prefix(gs: GlobalHeaderSet, a: int, b: int) -> bool:
    """True iff chain ``a`` is a prefix of chain ``b``."""
    if gs.height[a] > gs.height[b]:
        return False
    return gs.ancestor_at_height(b, gs.height[a]) == a


def prefix_relation(gs: GlobalHeaderSet, a: int, b: int) -> Relation:
    if is_prefix(gs, a, b):
        return Relation.A_PREFIX_OF_B
    if is_prefix(gs, b, a):
        return Relation.B_PREFIX_OF_A
    return Relation.INCOMPARABLE


def common_ancestor(gs: GlobalHeaderSet, a: int, b: int) -> int:
    par, hgt = gs.parent, gs.height
    while hgt[a] > hgt[b]:
        a = par[a]
    while hgt[b] > hgt[a]:
        b = par[b]
    while a != b:
        a, b = par[a], par[b]
    return a
