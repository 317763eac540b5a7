import pytest
from hypothesis import given, settings, strategies as st

from poslc.config import Scenario, dumps, gridpoint_label, loads
from poslc.engine import ProbeSchedule
from poslc.lottery import ConfigError, ProtocolParams


@st.composite
def scenarios(draw):
    num_nodes = draw(st.integers(4, 40))
    budget = draw(st.integers(1, 50))
    cap = draw(st.none() | st.integers(1, budget))
    params = ProtocolParams(
        rho=draw(st.floats(0.001, 2.0)),
        beta=draw(st.integers(0, num_nodes // 4)) / num_nodes,
        num_nodes=num_nodes,
        budget_k=budget,
        t_conf=draw(st.integers(0, 100)),
        horizon=draw(st.integers(1, 5000)),
        lottery_mode=draw(st.sampled_from(["binomial", "poisson"])),
        seed=draw(st.integers(0, 2**31)),
        rule_id=draw(st.sampled_from(["freshest", "longest-header", "equivocation-avoidance", "blocklisting"])),
        download_cap=cap,
    )
    sweep = draw(st.lists(st.sampled_from(["seed", "rho", "budget_k"]), unique=True, max_size=2))
    axes = []
    for key in sweep:
        if key == "rho":
            vals = draw(st.lists(st.floats(0.001, 1.0), min_size=1, max_size=3))
        else:
            vals = draw(st.lists(st.integers(cap or 1, 60), min_size=1, max_size=3))
        axes.append((key, tuple(vals)))
    return Scenario(params, ProbeSchedule(draw(st.integers(0, 9)), draw(st.integers(0, 50))), tuple(axes),
                    replications=draw(st.integers(1, 4)), out_dir="out/x")


@settings(max_examples=150, deadline=None)
@given(scenarios())
def test_round_trip_identity(sc):
    text = dumps(sc)
    back = loads(text)
    assert back == sc
    assert dumps(back) == text


def test_reports_line_and_key():
    with pytest.raises(ConfigError, match=r"line 3: \[protocol\] rho:"):
        loads("[protocol]\nbeta = 0.1\nrho = x\n")
    with pytest.raises(ConfigError, match=r"line 2: \[protocol\] colour: unknown key"):
        loads("[protocol]\ncolour = red\n")
    with pytest.raises(ConfigError, match=r"\[protocol\] beta"):
        loads("[protocol]\nbeta = 1.5\n")
    with pytest.raises(ConfigError, match=r"unknown section"):
        loads("[extras]\na = 1\n")
    with pytest.raises(ConfigError, match=r"\[sweep\] colour"):
        loads("[sweep]\ncolour = 1, 2\n")


def test_sweep_cardinality_and_labels():
    sc = loads("[sweep]\nrule_id = freshest, blocklisting\n[batch]\nreplications = 20\n")
    runs = sc.runs()
    assert sc.num_runs == len(runs) == 40
    assert len({(label, p.seed) for label, p in runs}) == 40
    assert {label for label, _ in runs} == {"rule_id=freshest", "rule_id=blocklisting"}
    assert [p.seed for _, p in runs[:20]] == list(range(20))
    assert gridpoint_label({}) == "base"


def test_max_runs_cap():
    with pytest.raises(ConfigError, match="max_runs"):
        loads("[sweep]\nseed = 1, 2, 3\n[batch]\nreplications = 5\nmax_runs = 10\n")


def test_invalid_gridpoint_rejected_up_front():
    with pytest.raises(ConfigError):
        loads("[sweep]\nbeta = 0.1, 1.5\n")
