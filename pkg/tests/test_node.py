from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import World
from poslc.environment import adversary_push, upload_content
from poslc.headertree import GENESIS, extend
from poslc.node import download_tick, on_received_content, on_received_header_chain, propose, slot_tick
from poslc.rules import BLOCKLISTING, DOWNLOADED, INVALID, UNKNOWN


def adversarial_chain(w, producer, slots, parent=GENESIS, valid=True, upload=True):
    out = []
    for s in slots:
        cid = w.content(valid)
        parent = extend(w.gs, producer, s, parent, cid, now=s)
        if upload:
            upload_content(w.env, parent, cid, valid, s)
        out.append((parent, cid))
    return out


def test_header_receipt_adds_suffix_and_is_idempotent():
    w = World({1: (3,), 2: (3,)}, corrupted=(3,))
    (a, _), (b, _) = adversarial_chain(w, 3, [1, 2])
    node = w.nodes[0]
    assert on_received_header_chain(node, b)
    assert node.view.header_tree == [GENESIS, a, b]
    assert not on_received_header_chain(node, b)
    assert not on_received_header_chain(node, 999)


def test_equivocation_enters_blocklist():
    w = World({4: (3,)}, corrupted=(3,), rule=BLOCKLISTING)
    (x, _), = adversarial_chain(w, 3, [4])
    (y, _), = adversarial_chain(w, 3, [4])
    node = w.nodes[0]
    on_received_header_chain(node, x)
    assert not node.view.blocklist
    on_received_header_chain(node, y)
    assert node.view.blocklist == {3}


def test_content_waits_for_parent():
    w = World({1: (3,), 2: (3,)}, corrupted=(3,))
    (a, ca), (b, cb) = adversarial_chain(w, 3, [1, 2])
    node = w.nodes[0]
    adversary_push(w.env, 0, b)
    on_received_content(node, b, cb, True)
    assert node.view.status[b] == UNKNOWN
    on_received_content(node, a, ca, True)
    assert node.view.status[a] == DOWNLOADED and node.view.status[b] == DOWNLOADED
    assert node.longest_downloaded == b and node.dc_height == 2


def test_invalid_content_leaves_dc_and_blocks_descendants():
    w = World({1: (3,), 2: (3,)}, corrupted=(3,))
    (a, ca), (b, cb) = adversarial_chain(w, 3, [1, 2], valid=False)
    node = w.nodes[0]
    adversary_push(w.env, 0, b)
    on_received_content(node, a, ca, False)
    assert node.view.status[a] == INVALID
    assert node.longest_downloaded == GENESIS
    assert download_tick(node) == (None, False, False)


def test_longer_downloaded_chain_takes_over():
    w = World({1: (0,), 2: (3,), 3: (3,)}, corrupted=(3,))
    node = w.nodes[0]
    w.env.now = 1
    mine = propose(node, 1)
    assert node.longest_downloaded == mine and node.dc_height == 1
    chain = adversarial_chain(w, 3, [2, 3])
    adversary_push(w.env, 0, chain[-1][0])
    for blk, cid in chain:
        on_received_content(node, blk, cid, True)
    assert node.longest_downloaded == chain[-1][0] and node.dc_height == 2


def test_proposal_extends_dc_and_broadcasts():
    w = World({3: (1,)})
    node = w.nodes[1]
    w.env.now = 3
    assert propose(node, 2) is None
    b = propose(node, 3)
    assert w.gs.slot[b] == 3 and w.gs.height[b] == 1 and w.gs.parent[b] == GENESIS
    assert b in w.env.repo and w.env.schedule.pending_headers == [(b, 1)]
    w.env.deliver_pending()
    assert all(n.view.knows(b) for n in w.nodes.values())


def test_idle_slot_uses_no_budget_and_ledger_truncates():
    w = World({}, t_conf=2)
    node = w.nodes[0]
    out = slot_tick(node, 1)
    assert out == {"proposed": -1, "used": 0, "wasted": 0, "idle": 4}
    assert node.ledger_history == [GENESIS]


def test_slot_tick_downloads_honest_block():
    w = World({1: (1,)}, t_conf=1)
    w.env.now = 1
    b = propose(w.nodes[1], 1)
    w.env.deliver_pending()
    out = slot_tick(w.nodes[0], 1)
    assert out["used"] == 1 and w.nodes[0].longest_downloaded == b
    assert w.nodes[0].log_tip(1) == GENESIS
    assert w.nodes[0].log_tip(2) == b


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 3), st.integers(0, 50)), min_size=1, max_size=30))
def test_dc_stays_downloaded_and_maximal(steps):
    horizon = 40
    leaders = {t: (0, 1, 2, 3) for t in range(1, horizon + 1)}
    w = World(leaders, horizon=horizon, corrupted=(3,), t_conf=2)
    node = w.nodes[0]
    t = 0
    tips = [GENESIS]
    for gap, pick in steps:
        t += gap
        if t > horizon:
            break
        w.env.now = t
        parent = tips[pick % len(tips)]
        cid = w.content(pick % 4 != 0)
        blk = extend(w.gs, 3, t, parent, cid, now=t)
        upload_content(w.env, blk, cid, pick % 4 != 0, t)
        tips.append(blk)
        adversary_push(w.env, 0, blk)
        slot_tick(node, t)
        st_ = node.view.status
        assert all(st_[b] == DOWNLOADED for b in node.dc_path)
        downloaded = [b for b in node.view.header_tree if st_[b] == DOWNLOADED]
        assert node.dc_height == max(w.gs.height[b] for b in downloaded)
