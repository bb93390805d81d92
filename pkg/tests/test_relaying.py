import numpy as np
import pytest

from slicesim import relaying
from slicesim.scenario import Position


def pos_row(xs, y=0.0):
    return {i: Position(x=float(x), y=y) for i, x in enumerate(xs)}


# --------------------------------------------------------------- low-SINR set

def test_identify_low_sinr_strict_cutoff_sorted():
    sinr = {3: -2.0, 1: 0.0, 7: -0.001, 2: 5.0}
    assert relaying.identify_low_sinr([3, 1, 7, 2], sinr) == [3, 7]
    assert relaying.identify_low_sinr([3, 1, 7, 2], sinr, threshold_db=5.5) == [1, 2, 3, 7]


def test_identify_low_sinr_rejects_non_finite_cutoff():
    with pytest.raises(ValueError):
        relaying.identify_low_sinr([0], {0: 1.0}, threshold_db=np.inf)


def test_identify_low_sinr_empty():
    assert relaying.identify_low_sinr([], {}) == []


# ------------------------------------------------------------- relay selection

def test_select_relay_prefers_nearer_on_equal_sinr():
    # equal SINR margin, 20 m vs 120 m away: range headroom breaks the tie
    positions = pos_row([0.0, 20.0, 120.0])
    sinr = {1: 30.0, 2: 30.0}
    pick = relaying.select_relay(0, [1, 2], sinr, positions, 2000.0)
    assert pick == 1


def test_select_relay_prefers_stronger_when_both_near():
    positions = pos_row([0.0, 10.0, 12.0])
    sinr = {1: 4.0, 2: 9.0}
    pick = relaying.select_relay(0, [1, 2], sinr, positions, 2000.0)
    assert pick == 2


def test_select_relay_range_limit_and_wraparound():
    positions = pos_row([0.0, 200.0, 1990.0])
    sinr = {1: 20.0, 2: 20.0}
    # 1 is 200 m away (out of the 150 m default), 2 is 10 m across the wrap
    assert relaying.select_relay(0, [1, 2], sinr, positions, 2000.0) == 2
    assert relaying.select_relay(0, [1], sinr, positions, 2000.0) is None


def test_select_relay_excludes_self_and_handles_empty():
    positions = pos_row([0.0])
    assert relaying.select_relay(0, [0], {0: 50.0}, positions, 2000.0) is None
    assert relaying.select_relay(0, [], {}, positions, 2000.0) is None


def test_select_relay_tie_goes_to_lower_id():
    positions = {5: Position(0.0, 0.0), 9: Position(50.0, 0.0), 4: Position(-50.0, 0.0)}
    sinr = {9: 10.0, 4: 10.0}
    assert relaying.select_relay(5, [9, 4], sinr, positions, 2000.0) == 4


def test_select_relay_negative_margin_still_eligible():
    # a candidate below the quality threshold scores negative but can still win
    positions = pos_row([0.0, 30.0])
    pick = relaying.select_relay(0, [1], {1: 1.0}, positions, 2000.0)
    assert pick == 1


# ----------------------------------------------------------------- relay plan

def test_build_relay_plan_respects_client_cap():
    # four lows cluster around one strong candidate; cap at 2 strands the rest
    positions = pos_row([0.0, 10.0, 20.0, 30.0, 15.0])
    sinr = {4: 20.0}
    plan = relaying.build_relay_plan([0, 1, 2, 3], [4], sinr, positions, 2000.0,
                                     max_clients=2)
    assert plan.clients_of(4) == [0, 1]
    assert 2 not in plan.assignment and 3 not in plan.assignment


def test_build_relay_plan_spills_to_second_choice():
    positions = pos_row([0.0, 5.0, 40.0])
    sinr = {1: 20.0, 2: 8.0}
    plan = relaying.build_relay_plan([0], [1, 2], sinr, positions, 2000.0,
                                     max_clients=1)
    assert plan.assignment == {0: 1}
    positions2 = {**positions, 3: Position(2.0, 0.0)}
    plan2 = relaying.build_relay_plan([0, 3], [1, 2], sinr, positions2, 2000.0,
                                      max_clients=1)
    # id order: 0 takes the strong relay, 3 falls back to the weaker one
    assert plan2.assignment == {0: 1, 3: 2}


def test_build_relay_plan_unreachable_low_stays_direct():
    positions = pos_row([0.0, 1000.0])
    plan = relaying.build_relay_plan([0], [1], {1: 20.0}, positions, 2000.0)
    assert plan.assignment == {}
    assert plan.relays() == ()


def test_relay_plan_views_sorted():
    plan = relaying.RelayPlan(assignment={9: 2, 1: 2, 5: 7})
    assert plan.relays() == (2, 7)
    assert plan.clients_of(2) == [1, 9]
    assert plan.clients_of(7) == [5]
    assert plan.clients_of(3) == []


def test_build_relay_plan_deterministic():
    rng = np.random.default_rng(42)
    xs = rng.uniform(0, 2000, size=30)
    positions = pos_row(xs)
    sinr = {i: float(rng.normal(5, 4)) for i in range(30)}
    lows = [i for i in range(30) if sinr[i] < 0]
    cands = [i for i in range(30) if sinr[i] >= 3]
    a = relaying.build_relay_plan(lows, cands, sinr, positions, 2000.0)
    b = relaying.build_relay_plan(list(reversed(lows)), set(cands), sinr,
                                  positions, 2000.0)
    assert a == b


# ------------------------------------------------------------- two-hop decode

def test_relay_delivery_single_attempt_probability():
    rng = np.random.default_rng(99)
    n = 100_000
    wins = sum(relaying.relay_delivery(rng, 0.1, 0.1)[0] for _ in range(n))
    assert wins / n == pytest.approx(0.81, abs=0.01)


def test_relay_delivery_latency_includes_store_and_forward():
    rng = np.random.default_rng(0)
    ok, latency = relaying.relay_delivery(rng, 0.0, 0.0)
    assert ok and latency == 2 + relaying.STORE_AND_FORWARD_TTIS


def test_relay_delivery_first_hop_failure_is_cheap():
    rng = np.random.default_rng(0)
    ok, latency = relaying.relay_delivery(rng, 1.0, 0.0)
    assert not ok and latency == 1


def test_relay_delivery_retries_extend_latency():
    class FixedRng:
        def __init__(self, draws):
            self.draws = iter(draws)

        def random(self):
            return next(self.draws)

    # hop 1 fails once then succeeds, hop 2 succeeds immediately
    rng = FixedRng([0.05, 0.5, 0.5])
    ok, latency = relaying.relay_delivery(rng, 0.1, 0.1, max_attempts=2)
    assert ok and latency == 2 + relaying.STORE_AND_FORWARD_TTIS + 1
