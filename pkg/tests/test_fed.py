import io

import numpy as np
import pytest

from frma.analytic import PhyTimings, channel_times
from frma.channel import ChannelEngine, Outcome, StepResult, run
from frma.fed import (
    AggregationError,
    FedConfig,
    FedCoordinator,
    ROUND_HEADER,
    TriggerKind,
    aggregate,
    broadcast,
)
from frma.qnn import Arch, Experience, Trainer, forward_batch, init_weights

PT = PhyTimings()
T_S = channel_times(PT, "basic")[0]
SMALL = Arch(input_dim=3, hidden=4, n_plain=1, n_blocks=1, n_actions=2)


def test_single_model_is_identity():
    w = init_weights(1)
    assert np.array_equal(aggregate([w]).flat(), w.flat())


def test_mean_of_two():
    a, b = init_weights(0, SMALL), init_weights(0, SMALL)
    a.weights[0][0, 0], b.weights[0][0, 0] = 1.0, 3.0
    assert aggregate([a, b]).weights[0][0, 0] == 2.0


def test_equal_models_exact():
    w = init_weights(2)
    for n in (2, 5, 7):
        assert np.array_equal(aggregate([w.copy() for _ in range(n)]).flat(), w.flat())


def test_permutation_invariance_and_convexity():
    rng = np.random.default_rng(0)
    for k in range(20):
        ws = [init_weights(int(s), SMALL) for s in rng.integers(0, 2 ** 31, 5)]
        g = aggregate(ws).flat()
        perm = [ws[i] for i in rng.permutation(5)]
        assert np.array_equal(aggregate(perm).flat(), g)
        stack = np.stack([w.flat() for w in ws])
        assert np.all(g >= stack.min(0)) and np.all(g <= stack.max(0))


def test_architecture_mismatch_rejected():
    with pytest.raises(AggregationError):
        aggregate([init_weights(0), init_weights(0, SMALL)])
    with pytest.raises(AggregationError):
        aggregate([])


def test_config_validation():
    with pytest.raises(ValueError):
        FedConfig(period=0)
    with pytest.raises(ValueError):
        FedConfig(overhead_us=-1)
    assert FedConfig(trigger="slots").trigger is TriggerKind.SLOTS


class _Station:
    """Scripted channel policy that carries a trainer like an FRMA station."""

    def __init__(self, seed, p=0.2):
        self.trainer = Trainer(init_weights(seed, SMALL), rng=np.random.default_rng(seed))
        self.rng = np.random.default_rng(seed + 1)
        self.p = p

    def decide(self):
        return bool(self.rng.random() < self.p)

    def observe(self, busy):
        pass

    def on_feedback(self, fb):
        pass


def success():
    return StepResult(Outcome.SUCCESS, (0,), 0, 220, T_S, ())


def idle():
    return StepResult(Outcome.IDLE, (), 0, 1, PT.slot_us, ())


def test_success_trigger_counts_rounds():
    stations = [_Station(i) for i in range(3)]
    eng = ChannelEngine(3, PT)
    fc = FedCoordinator(FedConfig(period=100), stations, overhead_us=T_S)
    for _ in range(250):
        fc.after_step(eng, success())
        fc.after_step(eng, idle())
    assert len(fc.rounds) == 2


def test_slot_trigger_counts_rounds():
    stations = [_Station(i) for i in range(2)]
    eng = ChannelEngine(2, PT)
    fc = FedCoordinator(FedConfig(period=1000, trigger="slots"), stations, overhead_us=0.0)
    for _ in range(2500):
        eng.step([False, False])
        fc.after_step(eng, idle())
    assert len(fc.rounds) == 2


def test_broadcast_equalizes_and_leaves_local_state():
    stations = [_Station(i) for i in range(4)]
    for k, s in enumerate(stations):
        s.trainer.buffer.push(Experience(np.zeros(3), 0, float(k), np.zeros(3)))
        s.trainer.train_steps = 10 * k
    before = [s.trainer.buffer.ordered()[0].r_next for s in stations]
    g = aggregate([s.trainer.w.copy() for s in stations])
    broadcast(g, stations)
    probes = np.random.default_rng(0).random((16, 3))
    ref = forward_batch(stations[0].trainer.w, probes)
    for s in stations:
        assert np.array_equal(forward_batch(s.trainer.w, probes), ref)
        assert np.array_equal(forward_batch(s.trainer.w_target, probes), ref)
        assert s.trainer.w is not g
    assert [s.trainer.buffer.ordered()[0].r_next for s in stations] == before
    assert [s.trainer.train_steps for s in stations] == [0, 10, 20, 30]


def run_scripted(enabled, overhead):
    stations = [_Station(i, p=0.1) for i in range(4)]
    fc = FedCoordinator(FedConfig(period=10), stations, overhead_us=overhead, enabled=enabled)
    # a fixed step budget keeps the event sequence identical with and without rounds
    eng = ChannelEngine(4, PT)
    for _ in range(3000):
        res = eng.step([s.decide() for s in stations])
        fc.after_step(eng, res)
    return eng, fc


def test_overhead_accounting_against_counterfactual():
    on, fc_on = run_scripted(True, 777.0)
    off, fc_off = run_scripted(False, 777.0)
    assert on.metrics.per_station_successes == off.metrics.per_station_successes
    assert len(fc_on.rounds) > 0 and fc_off.rounds == []
    assert on.elapsed_us - off.elapsed_us == pytest.approx(len(fc_on.rounds) * 777.0, rel=1e-12)
    assert on.metrics.overhead_events == len(fc_on.rounds)


def test_default_overhead_is_basic_success_period():
    fc = FedCoordinator(FedConfig(), [], overhead_us=T_S)
    assert fc.overhead_us == T_S
    assert FedCoordinator(FedConfig(overhead_us=5.0), [], overhead_us=T_S).overhead_us == 5.0


def test_round_log_csv():
    buf = io.StringIO()
    stations = [_Station(i, p=0.1) for i in range(3)]
    fc = FedCoordinator(FedConfig(period=5), stations, overhead_us=T_S, log=buf)
    run(stations, 2e5, PT, seed=1, after_step=fc.after_step)
    lines = buf.getvalue().splitlines()
    assert lines[0] == ",".join(ROUND_HEADER)
    assert len(lines) == len(fc.rounds) + 1
    assert lines[1].split(",")[0] == "1" and lines[1].split(",")[3] == "3"
