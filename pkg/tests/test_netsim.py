import numpy as np
import pytest

from dsdlab.errors import IncomparableReportsError
from dsdlab.latency import ClusterConfig, t_dsd, t_std
from dsdlab.netsim import (
    EventLoop,
    LatencySampler,
    measured_speedup,
    simulate_dsd,
    simulate_standard,
    simulate_windows,
)
from dsdlab.verifier import BONUS, RESAMPLE, TokenDecision, VerificationResult

C = ClusterConfig(4, 1.0, 5.0)
DET = LatencySampler.for_cluster(C)


def fake_round(k, gamma=8):
    """Verification result committing ``k`` tokens (k - 1 accepted + extra)."""
    acc = k - 1
    decisions = tuple(TokenDecision(0, False, 0.0, 1.0, True) for _ in range(acc))
    if acc < gamma:
        decisions += (TokenDecision(1, True, 0.0, 0.5, False, replacement=0),)
        return VerificationResult(decisions, acc, 0, RESAMPLE)
    return VerificationResult(decisions, acc, 0, BONUS)


def test_event_loop_orders_ties_by_insertion():
    loop, seen = EventLoop(), []
    loop.schedule(1.0, seen.append, "b")
    loop.schedule(0.5, seen.append, "a")
    loop.schedule(1.0, seen.append, "c")
    loop.run()
    assert seen == ["a", "b", "c"]
    assert loop.now == 1.0


def test_standard_single_node():
    rep = simulate_standard(ClusterConfig(1, 2.0, 5.0), 7, LatencySampler.for_cluster(ClusterConfig(1, 2.0, 5.0)))
    assert rep.total_time == 14.0
    assert rep.total_sync_rounds == 7
    assert all(t.comm_time == 0 for t in rep.traces)


def test_standard_matches_formula():
    rep = simulate_standard(C, 4, DET)
    assert rep.total_time == 64
    assert sum(t.comm_time for t in rep.traces) == 60
    assert rep.total_tokens == 4


def test_jittered_mean():
    c = ClusterConfig(2, 1.0, 5.0)
    s = LatencySampler.for_cluster(c, jitter_halfwidth=1.0)
    rep = simulate_standard(c, 10_000, s, np.random.default_rng(0))
    assert abs(np.mean([t.comm_time for t in rep.traces]) - 5.0) <= 0.05


def test_dsd_single_round():
    rep = simulate_dsd(C, [fake_round(4)], DET)
    assert rep.total_time == 19
    assert rep.total_sync_rounds == 1


def test_dsd_unit_rounds_equal_standard():
    rep = simulate_dsd(C, [fake_round(1)] * 6, DET)
    assert rep.total_time == simulate_standard(C, 6, DET).total_time


def test_dsd_single_node_has_no_comm():
    c = ClusterConfig(1, 1.0, 5.0)
    rep = simulate_dsd(c, [fake_round(3), fake_round(9)], LatencySampler.for_cluster(c))
    assert all(t.comm_time == 0 for t in rep.traces)


def test_dsd_trims_to_total_tokens():
    rep = simulate_dsd(C, [fake_round(4), fake_round(4), fake_round(4)], DET, total_tokens=9)
    assert [t.tokens_committed for t in rep.traces] == [4, 4, 1]
    rep = simulate_dsd(C, [fake_round(4), fake_round(4), fake_round(4)], DET, total_tokens=8)
    assert rep.total_sync_rounds == 2


def test_exactness_grid():
    for n in range(1, 17):
        for t0 in (0.5, 1, 2):
            for t1 in (0, 1, 5, 20):
                c = ClusterConfig(n, t0, t1)
                s = LatencySampler.for_cluster(c)
                for k in range(1, 9):
                    assert abs(simulate_standard(c, k, s).total_time - t_std(k, c)) <= 1e-9
                    rep = simulate_dsd(c, [fake_round(k)] * 3, s)
                    assert abs(rep.total_time - 3 * t_dsd(k, c)) <= 1e-9
                    for tr in rep.traces:
                        assert tr.total_time == pytest.approx(tr.compute_time + tr.comm_time, abs=1e-12)


def test_mixed_rounds_sum():
    sizes = [1, 5, 2, 9, 3]
    rep = simulate_windows(C, sizes, DET)
    assert rep.total_time == pytest.approx(sum(t_dsd(k, C) for k in sizes), abs=1e-9)
    assert rep.total_sync_rounds == len(sizes)


def test_deterministic_with_jitter():
    s = LatencySampler.for_cluster(C, jitter_halfwidth=2.0)
    a = simulate_dsd(C, [fake_round(3)] * 20, s, np.random.default_rng(4))
    b = simulate_dsd(C, [fake_round(3)] * 20, s, np.random.default_rng(4))
    assert a == b


def test_jitter_converges_to_deterministic():
    rounds = [fake_round(3)] * 200
    det = simulate_dsd(C, rounds, DET).total_time
    gaps = []
    for h in (2.0, 0.2, 0.02):
        s = LatencySampler.for_cluster(C, jitter_halfwidth=h)
        gaps.append(abs(simulate_dsd(C, rounds, s, np.random.default_rng(1)).total_time - det))
    assert gaps[0] > gaps[1] > gaps[2]


def test_measured_speedup():
    std = simulate_standard(C, 4, DET)
    dsd = simulate_dsd(C, [fake_round(4)], DET)
    assert measured_speedup(std, std) == 1.0
    assert measured_speedup(std, dsd) == pytest.approx(64 / 19)
    with pytest.raises(IncomparableReportsError):
        measured_speedup(simulate_standard(C, 5, DET), dsd)


def test_sampler_validation():
    with pytest.raises(ValueError):
        LatencySampler("deterministic", 5.0, 1.0)
    with pytest.raises(ValueError):
        LatencySampler("uniform-jitter", 1.0, 2.0)
    with pytest.raises(ValueError):
        LatencySampler("gaussian", 1.0, 0.0)
