import json
import math

import numpy as np
import pytest

from asyncgp.aggregation import AggregatorKind
from asyncgp.errors import InputError, ResourceError
from asyncgp.gp import GPConfig
from asyncgp.kernels import KernelSpec
from asyncgp.simnet import (
    ComputeModel,
    DelaySampler,
    EventKind,
    NetworkSimulator,
    NodeConfig,
    SimEvent,
    StreamItem,
    delay_trace,
    dump_jsonl,
    monotone_growth_segments,
    record_stream_hash,
    sorted_delay_view,
    to_us,
)


def gp_cfg(max_data=50):
    return GPConfig(kernel=KernelSpec.from_params("se", dim=1), noise_std=0.05, max_data=max_data)


def node(compute=0.0, up=0.0, down=0.0, hz=1000.0, queueing="latest", seed=0):
    return NodeConfig(
        gp=gp_cfg(),
        listen_hz=hz,
        compute=ComputeModel("constant", seconds=compute),
        uplink=DelaySampler.from_dict(up).with_seed(seed, 0) if not isinstance(up, DelaySampler) else up,
        downlink=DelaySampler.from_dict(down).with_seed(seed, 1) if not isinstance(down, DelaySampler) else down,
        queueing=queueing,
    )


def slow_query(t):
    x = np.array([0.5 * math.sin(0.3 * t)])
    return x, math.sin(x[0])


def training(n=40):
    xs = np.linspace(-1, 1, n)
    return [StreamItem(0.0, np.array([x]), math.sin(x), (j % 4,)) for j, x in enumerate(xs)]


class TestDelaySampler:
    def test_constant(self):
        assert DelaySampler.from_dict(0.003).sample(17) == 0.003

    def test_seeded_reproducible(self):
        a = DelaySampler("uniform", lo=1e-3, hi=5e-3, seed=(1, 2))
        b = DelaySampler("uniform", lo=1e-3, hi=5e-3, seed=(1, 2))
        # order of access does not matter
        assert [a.sample(i) for i in range(10)] == [b.sample(i) for i in reversed(range(10))][::-1]
        assert all(1e-3 <= a.sample(i) <= 5e-3 for i in range(10))

    def test_different_seeds_differ(self):
        a = DelaySampler("lognormal", seed=(1,))
        assert a.sample(0) != a.with_seed(2).sample(0)
        assert a.sample(0) > 0

    def test_trace_cycles(self):
        d = DelaySampler("trace", trace=[0.001, 0.002])
        assert [d.sample(i) for i in range(3)] == [0.001, 0.002, 0.001]

    def test_invalid(self):
        with pytest.raises(InputError):
            DelaySampler("gamma")
        with pytest.raises(InputError):
            DelaySampler("uniform", lo=0.005, hi=0.001)

    def test_roundtrip(self):
        d = DelaySampler("uniform", lo=1e-3, hi=2e-3)
        assert DelaySampler.from_dict(d.to_dict()).to_dict() == d.to_dict()


class TestEvents:
    def test_tie_break_order(self):
        evs = [SimEvent(10, EventKind.AGGREGATE, -1, 1), SimEvent(10, EventKind.REPLY_DELIVERED, 2, 2),
               SimEvent(10, EventKind.BROADCAST, -1, 3), SimEvent(9, EventKind.AGGREGATE, -1, 4)]
        kinds = [e.kind for e in sorted(evs)]
        assert kinds == [EventKind.AGGREGATE, EventKind.BROADCAST, EventKind.REPLY_DELIVERED, EventKind.AGGREGATE]

    def test_to_us(self):
        assert to_us(0.02) == 20000
        assert to_us(1e-3) == 1000


class TestSimulator:
    def test_no_nodes(self):
        with pytest.raises(InputError):
            NetworkSimulator([], slow_query, 1.0)

    def test_zero_delay_is_synchronous(self):
        nodes = [node(hz=1e6) for _ in range(4)]
        sim = NetworkSimulator(nodes, slow_query, 0.5, 0.02, 4, stream=training())
        res = sim.run()
        for tick in res.ticks:
            assert len(tick.records) == 4
            assert all(r.produced_at == tick.t for r in tick.records)
            assert tick.delays() == [0.0] * 4

    def test_deterministic(self, tmp_path):
        def run(path):
            nodes = [node(compute=0.004, up={"distribution": "uniform", "lo": 1e-3, "hi": 5e-3},
                          down={"distribution": "uniform", "lo": 1e-3, "hi": 5e-3}, seed=i) for i in range(4)]
            sim = NetworkSimulator(nodes, slow_query, 2.0, 0.02, 4, list(AggregatorKind), training())
            res = sim.run()
            dump_jsonl(path, res.ticks, res.delivered)
            return res

        a, b = run(tmp_path / "a.jsonl"), run(tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
        assert a.stream_hash() == b.stream_hash() == record_stream_hash(a.delivered)

    def test_latest_supersedes(self):
        n = node(compute=0.05)
        sim = NetworkSimulator([n], slow_query, 1.0, 0.02, 4)
        m = sim.run().metrics["nodes"][0]
        assert m["superseded"] > 0
        assert m["reconciled"]

    def test_fifo_serial_worker(self):
        sim = NetworkSimulator([node(compute=0.1, queueing="fifo")], slow_query, 1.0, 0.02, 4)
        res = sim.run()
        rx = [r.received_at for r in res.delivered]
        assert rx == sorted(rx)
        assert np.all(np.diff(rx) >= 0.1 - 1e-9)
        assert [r.produced_at for r in res.delivered] == pytest.approx([0.02 * k for k in range(len(rx))])

    def test_dropped_messages(self):
        up = DelaySampler("trace", trace=[0.001, math.inf])
        sim = NetworkSimulator([node(up=up)], slow_query, 0.2, 0.02, 4)
        m = sim.run().metrics["nodes"][0]
        assert m["uplink_dropped"] == 5
        assert m["reconciled"]

    def test_event_budget(self):
        with pytest.raises(ResourceError):
            NetworkSimulator([node()], slow_query, 1.0, 0.02, 4, max_events=50).run()

    def test_run_until_is_incremental(self):
        a = NetworkSimulator([node(compute=0.003)], slow_query, 1.0)
        a.run_until(0.4)
        assert len(a.ticks) == 21
        a.run_until(1.0)
        b = NetworkSimulator([node(compute=0.003)], slow_query, 1.0).run()
        assert [t.results for t in a.ticks] == [t.results for t in b.ticks]

    def test_empty_set_prior_free_results_are_none(self):
        sim = NetworkSimulator([node(compute=0.5)], slow_query, 0.1, 0.02, 4, list(AggregatorKind))
        first = sim.run().ticks[0]
        assert first.results[AggregatorKind.MOE] is None
        assert first.results[AggregatorKind.ASYNCDGP].omega == 2.0

    def test_training_reaches_nodes(self):
        sim = NetworkSimulator([node() for _ in range(4)], slow_query, 0.1, stream=training(40))
        sim.run()
        assert [len(n.gp) for n in sim.nodes] == [10, 10, 10, 10]


class TestDelayViews:
    def test_stalled_node_grows_linearly(self):
        # hand simulation: node 0 takes 0.1 s, queries every 0.02 s, fifo
        nodes = [node(compute=0.1, queueing="fifo"), node(compute=0.001)]
        stream = [StreamItem(0.0, item.x, item.y, (0, 1)) for item in training()]
        sim = NetworkSimulator(nodes, slow_query, 1.0, 0.02, 4, stream=stream)
        res = sim.run()
        rows = [r for r in delay_trace(res.ticks, 2) if r[2] == 0]
        t = [r[1] for r in rows]
        d = [r[3] for r in rows]
        # query 0 is answered at 0.1 and ages 0.02 per tick; the next listen
        # tick is 0.101, so query 1 (sent at 0.02) lands at 0.201 and first
        # shows at the 0.22 tick with age 0.20
        assert t[:7] == pytest.approx([0.10, 0.12, 0.14, 0.16, 0.18, 0.20, 0.22])
        assert d[:7] == pytest.approx([0.10, 0.12, 0.14, 0.16, 0.18, 0.20, 0.20])
        segs = monotone_growth_segments(t, d)
        assert len(segs) >= 5
        assert all(e - s + 1 >= 4 for s, e in segs)

    def test_empty_tick_row(self):
        sim = NetworkSimulator([node(compute=0.5)], slow_query, 0.04)
        view = sorted_delay_view(sim.run().ticks)
        assert view[0] == (0.0, [])

    def test_segments_detector(self):
        times = [0, 1, 2, 3, 4, 5, 6]
        deltas = [0, 1, 2, 0.5, 1.5, 2.5, 3.5]
        assert monotone_growth_segments(times, deltas) == [(0, 2), (3, 6)]

    def test_jsonl_lines_parse(self, tmp_path):
        sim = NetworkSimulator([node(compute=0.002)], slow_query, 0.1, aggregators=["asyncdgp", "bcm"])
        res = sim.run()
        dump_jsonl(tmp_path / "p.jsonl", res.ticks, res.delivered)
        lines = [json.loads(s) for s in (tmp_path / "p.jsonl").read_text().splitlines()]
        assert sum("record" in line for line in lines) == len(res.delivered)
        assert sum(line.get("kind") == "bcm" for line in lines) == len(res.ticks)
