"""Deterministic discrete-event simulation of the coordinator/expert protocol.

The coordinator broadcasts the current query ``x(t)`` every
``broadcast_interval`` seconds.  Each node listens at a fixed frequency, picks
up the newest pending query on its next listen tick, computes its GP
posterior (taking a modelled compute latency) and replies over a delayed
link.  At every broadcast tick the coordinator manages its information set
and runs the configured aggregators.

Simulated time is kept in integer microseconds so that ties are exact; equal
timestamps are ordered by ``(EventKind, node_id, sequence)``.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import math
import time as _wallclock
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .aggregation import (
    AggregatorKind,
    InformationSet,
    PredictionRecord,
    aggregate,
    manage_information_set,
)
from .errors import ContractError, InputError, ResourceError
from .gp import GPConfig, OnlineGP

US = 1_000_000


def to_us(seconds: float) -> int:
    return int(round(seconds * US))


class EventKind(IntEnum):
    STREAM_SAMPLE = 0
    BROADCAST = 1
    NODE_LISTEN_TICK = 2
    COMPUTE_DONE = 3
    REPLY_DELIVERED = 4
    AGGREGATE = 5


@dataclass(order=True)
class SimEvent:
    at: int
    kind: EventKind
    node_id: int
    seq: int
    payload: object = field(default=None, compare=False)

    @property
    def time_s(self) -> float:
        return self.at / US


@dataclass
class DelaySampler:
    """Nonnegative delay source; ``inf`` means the message is lost.

    Samples are drawn sequentially from a generator seeded with ``seed`` and
    cached, so ``sample(i)`` depends only on ``(seed, i)``.
    """

    distribution: str = "constant"
    value: float = 0.0
    lo: float = 0.0
    hi: float = 0.0
    mu: float = math.log(2e-3)
    sigma: float = 0.5
    trace: list = None
    path: str = None
    seed: tuple = (0,)

    def __post_init__(self):
        self.distribution = self.distribution.lower()
        if self.distribution not in ("constant", "uniform", "lognormal", "trace"):
            raise InputError(f"unknown delay distribution {self.distribution!r}")
        if self.distribution == "constant" and not self.value >= 0:
            raise InputError("constant delay must be >= 0")
        if self.distribution == "uniform" and not (0 <= self.lo <= self.hi):
            raise InputError("uniform delay needs 0 <= lo <= hi")
        if self.distribution == "trace":
            if self.trace is None and self.path is not None:
                with open(self.path) as fh:
                    self.trace = [float(tok) for tok in fh.read().replace(",", " ").split()]
            if not self.trace:
                raise InputError("trace delay needs a non-empty trace or path")
            if any(v < 0 or math.isnan(v) for v in self.trace):
                raise InputError("trace delays must be >= 0 (inf = dropped)")
        self.seed = tuple(int(s) for s in np.atleast_1d(self.seed))
        self._rng = np.random.default_rng(list(self.seed))
        self._drawn = []

    def with_seed(self, *seed) -> "DelaySampler":
        return DelaySampler(
            self.distribution, self.value, self.lo, self.hi, self.mu, self.sigma, self.trace, self.path, seed
        )

    def sample(self, index: int) -> float:
        if self.distribution == "constant":
            return self.value
        if self.distribution == "trace":
            return float(self.trace[index % len(self.trace)])
        while len(self._drawn) <= index:
            if self.distribution == "uniform":
                self._drawn.append(float(self._rng.uniform(self.lo, self.hi)))
            else:
                self._drawn.append(float(self._rng.lognormal(self.mu, self.sigma)))
        return self._drawn[index]

    def to_dict(self) -> dict:
        d = {"distribution": self.distribution}
        if self.distribution == "constant":
            d["value"] = self.value
        elif self.distribution == "uniform":
            d.update(lo=self.lo, hi=self.hi)
        elif self.distribution == "lognormal":
            d.update(mu=self.mu, sigma=self.sigma)
        else:
            d.update(trace=self.trace) if self.path is None else d.update(path=self.path)
        return d

    @classmethod
    def from_dict(cls, d) -> "DelaySampler":
        if isinstance(d, (int, float)):
            return cls("constant", value=float(d))
        d = dict(d)
        return cls(d.pop("distribution", "constant"), **d)


@dataclass
class ComputeModel:
    """Latency of one prediction: ``constant``, ``affine`` in buffer size, or ``measured``."""

    model: str = "affine"
    seconds: float = 1e-3
    base_s: float = 1e-3
    per_point_s: float = 5e-6

    def __post_init__(self):
        self.model = self.model.lower()
        if self.model not in ("constant", "affine", "measured"):
            raise InputError(f"unknown compute model {self.model!r}")
        if min(self.seconds, self.base_s, self.per_point_s) < 0:
            raise InputError("compute latencies must be >= 0")

    def latency(self, n_points: int, measured_s: float) -> float:
        if self.model == "constant":
            return self.seconds
        if self.model == "affine":
            return self.base_s + self.per_point_s * n_points
        return measured_s

    def to_dict(self) -> dict:
        if self.model == "constant":
            return {"model": "constant", "seconds": self.seconds}
        if self.model == "affine":
            return {"model": "affine", "base_s": self.base_s, "per_point_s": self.per_point_s}
        return {"model": "measured"}

    @classmethod
    def from_dict(cls, d) -> "ComputeModel":
        d = dict(d)
        return cls(d.pop("model", "affine"), **d)


@dataclass
class NodeConfig:
    gp: GPConfig
    listen_hz: float = 1000.0
    compute: ComputeModel = field(default_factory=ComputeModel)
    uplink: DelaySampler = field(default_factory=DelaySampler)
    downlink: DelaySampler = field(default_factory=DelaySampler)
    queueing: str = "latest"

    def __post_init__(self):
        if not self.listen_hz > 0:
            raise InputError("listen_hz must be positive")
        if self.queueing not in ("latest", "fifo"):
            raise InputError("queueing must be 'latest' or 'fifo'")
        if to_us(1.0 / self.listen_hz) < 1:
            raise InputError("listen_hz above 1 MHz is below the simulator's clock resolution")

    @property
    def listen_period_us(self) -> int:
        return to_us(1.0 / self.listen_hz)


@dataclass
class StreamItem:
    """Training sample delivered to ``targets`` (node indices) at time ``t``."""

    t: float
    x: np.ndarray
    y: float
    targets: tuple


@dataclass
class _Query:
    qid: int
    x: np.ndarray
    sent_us: int
    arrival_us: int


@dataclass
class _NodeState:
    cfg: NodeConfig
    gp: OnlineGP
    inbox: list = field(default_factory=list)
    busy: bool = False
    tick_at: int = None
    tick_token: int = 0
    iteration: int = 0
    counts: dict = field(
        default_factory=lambda: dict.fromkeys(
            [
                "broadcasts",
                "uplink_dropped",
                "superseded",
                "picked",
                "answered",
                "replies_delivered",
                "replies_dropped",
            ],
            0,
        )
    )


@dataclass
class TickLog:
    t: float
    query_point: tuple
    truth: float
    records: list
    results: dict

    def delays(self):
        return sorted(self.t - r.produced_at for r in self.records)


@dataclass
class SimulationResult:
    ticks: list
    delivered: list
    metrics: dict

    def stream_hash(self) -> str:
        return record_stream_hash(self.delivered)


def record_stream_hash(records) -> str:
    h = hashlib.sha256()
    for r in records:
        h.update(r.to_json().encode())
        h.update(b"\n")
    return h.hexdigest()


class NetworkSimulator:
    """Single-threaded event loop; fully reproducible unless a node uses ``measured`` latency.

    ``query_fn(t)`` returns ``(x, truth)`` for the broadcast at ``t`` seconds
    (``truth`` may be ``None``).  ``on_aggregate(tick_log)`` is called after
    every aggregation.
    """

    def __init__(
        self,
        nodes,
        query_fn,
        duration_s: float,
        broadcast_interval_s: float = 0.02,
        info_capacity: int = 4,
        aggregators=(AggregatorKind.ASYNCDGP,),
        stream=(),
        coordinator_cfg: GPConfig = None,
        selection: str = "fresh_first",
        responsibility: str = "log_ratio",
        on_aggregate=None,
        max_events: int = 10_000_000,
        gps=None,
    ):
        if not nodes:
            raise InputError("at least one node is required")
        if not broadcast_interval_s > 0 or to_us(broadcast_interval_s) < 1:
            raise InputError("broadcast interval must be positive")
        if not duration_s >= 0:
            raise InputError("duration must be >= 0")
        self.nodes = [
            _NodeState(cfg, gps[i] if gps is not None else OnlineGP(cfg.gp)) for i, cfg in enumerate(nodes)
        ]
        self.query_fn = query_fn
        self.end_us = to_us(duration_s)
        self.interval_us = to_us(broadcast_interval_s)
        self.aggregators = [AggregatorKind.parse(a) for a in aggregators]
        self.cfg = coordinator_cfg or nodes[0].gp
        self.L_f = self.cfg.L_f
        self.selection = selection
        self.responsibility = responsibility
        self.on_aggregate = on_aggregate
        self.max_events = max_events

        self.iset = InformationSet(info_capacity)
        self.inbox = []
        self.ticks = []
        self.delivered = []
        self.now = 0
        self._queue = []
        self._seq = 0
        self._n_events = 0
        self._qid = 0
        self._current_query = None
        self._stream = iter(sorted(stream, key=lambda s: s.t))
        self._push(0, EventKind.BROADCAST, -1)
        self._next_sample()

    # -- scheduling ---------------------------------------------------------

    def _push(self, at, kind, node_id, payload=None):
        if at < self.now:
            raise ContractError(f"event scheduled in the past ({at} < {self.now} us)")
        self._n_events += 1
        if self._n_events > self.max_events:
            raise ResourceError(f"event budget of {self.max_events} exceeded at t={self.now / US:.6f}s")
        self._seq += 1
        heapq.heappush(self._queue, SimEvent(int(at), kind, node_id, self._seq, payload))

    def _next_sample(self):
        item = next(self._stream, None)
        if item is not None:
            self._push(to_us(item.t), EventKind.STREAM_SAMPLE, -1, item)

    def _ensure_tick(self, i, strictly_after=None):
        node = self.nodes[i]
        if node.busy or not node.inbox:
            return
        earliest = max(min(q.arrival_us for q in node.inbox), self.now)
        if strictly_after is not None:
            earliest = max(earliest, strictly_after + 1)
        period = node.cfg.listen_period_us
        tick = -(-earliest // period) * period
        if node.tick_at is not None and node.tick_at <= tick:
            return
        node.tick_token += 1
        node.tick_at = tick
        self._push(tick, EventKind.NODE_LISTEN_TICK, i, node.tick_token)

    # -- handlers -----------------------------------------------------------

    def _on_broadcast(self, ev):
        t = ev.time_s
        x, truth = self.query_fn(t)
        x = np.asarray(x, dtype=float).reshape(-1)
        qid = self._qid
        self._qid += 1
        self._current_query = (x, truth)
        for i, node in enumerate(self.nodes):
            node.counts["broadcasts"] += 1
            delay = node.cfg.uplink.sample(qid)
            if math.isinf(delay):
                node.counts["uplink_dropped"] += 1
                continue
            node.inbox.append(_Query(qid, x, ev.at, ev.at + to_us(delay)))
            self._ensure_tick(i)
        self._push(ev.at, EventKind.AGGREGATE, -1)
        if ev.at + self.interval_us <= self.end_us:
            self._push(ev.at + self.interval_us, EventKind.BROADCAST, -1)

    def _on_listen(self, ev):
        node = self.nodes[ev.node_id]
        if ev.payload != node.tick_token:
            return
        node.tick_at = None
        if node.busy:
            # single worker; _on_compute_done schedules the next tick
            return
        ready = [q for q in node.inbox if q.arrival_us <= ev.at]
        if not ready:
            self._ensure_tick(ev.node_id)
            return
        if node.cfg.queueing == "latest":
            q = max(ready, key=lambda q: q.qid)
            node.counts["superseded"] += len(ready) - 1
            taken = {id(r) for r in ready}
        else:
            q = min(ready, key=lambda q: q.qid)
            taken = {id(q)}
        node.inbox = [r for r in node.inbox if id(r) not in taken]
        node.counts["picked"] += 1
        started = _wallclock.perf_counter()
        post = node.gp.predict(q.x)
        measured = _wallclock.perf_counter() - started
        latency = node.cfg.compute.latency(len(node.gp), measured)
        node.busy = True
        self._push(ev.at + to_us(latency), EventKind.COMPUTE_DONE, ev.node_id, (q, post))

    def _on_compute_done(self, ev):
        node = self.nodes[ev.node_id]
        q, post = ev.payload
        node.busy = False
        k = node.iteration
        node.iteration += 1
        node.counts["answered"] += 1
        delay = node.cfg.downlink.sample(k)
        if math.isinf(delay):
            node.counts["replies_dropped"] += 1
        else:
            self._push(ev.at + to_us(delay), EventKind.REPLY_DELIVERED, ev.node_id, (k, q, post))
        self._ensure_tick(ev.node_id, strictly_after=ev.at)

    def _on_reply(self, ev):
        k, q, post = ev.payload
        node = self.nodes[ev.node_id]
        node.counts["replies_delivered"] += 1
        rec = PredictionRecord(
            node_id=ev.node_id,
            iteration=k,
            query_point=tuple(q.x),
            mean=post.mean,
            std=post.std,
            produced_at=q.sent_us / US,
            received_at=ev.time_s,
        )
        self.inbox.append(rec)
        self.delivered.append(rec)

    def _on_aggregate(self, ev):
        t = ev.time_s
        x, truth = self._current_query
        self.iset = manage_information_set(self.iset, self.inbox, x, self.cfg, self.L_f, self.selection)
        self.inbox = []
        results = {}
        for kind in self.aggregators:
            if not len(self.iset) and kind in (AggregatorKind.POE, AggregatorKind.GPOE, AggregatorKind.MOE):
                results[kind] = None
                continue
            results[kind] = aggregate(kind, self.iset, x, self.cfg, self.L_f, self.responsibility)
        log = TickLog(t, tuple(x), truth, list(self.iset.records), results)
        self.ticks.append(log)
        if self.on_aggregate is not None:
            self.on_aggregate(log)

    def _on_sample(self, ev):
        item = ev.payload
        for i in item.targets:
            self.nodes[i].gp.update(item.x, item.y)
        self._next_sample()

    _HANDLERS = {
        EventKind.STREAM_SAMPLE: _on_sample,
        EventKind.BROADCAST: _on_broadcast,
        EventKind.NODE_LISTEN_TICK: _on_listen,
        EventKind.COMPUTE_DONE: _on_compute_done,
        EventKind.REPLY_DELIVERED: _on_reply,
        EventKind.AGGREGATE: _on_aggregate,
    }

    # -- driving ------------------------------------------------------------

    def run_until(self, t_s: float):
        """Process every event with timestamp <= ``t_s`` (capped at the horizon)."""
        limit = min(to_us(t_s), self.end_us)
        while self._queue and self._queue[0].at <= limit:
            ev = heapq.heappop(self._queue)
            self.now = ev.at
            self._HANDLERS[ev.kind](self, ev)
        self.now = max(self.now, limit)

    def run(self) -> SimulationResult:
        self.run_until(self.end_us / US)
        return self.result()

    def result(self) -> SimulationResult:
        return SimulationResult(self.ticks, self.delivered, self.metrics())

    def metrics(self) -> dict:
        per_node = []
        for i, node in enumerate(self.nodes):
            c = dict(node.counts)
            c["node_id"] = i
            c["pending_queries"] = len(node.inbox)
            c["computing"] = c["picked"] - c["answered"]
            c["replies_in_flight"] = c["answered"] - c["replies_delivered"] - c["replies_dropped"]
            c["reconciled"] = (
                c["broadcasts"]
                == c["uplink_dropped"] + c["superseded"] + c["picked"] + c["pending_queries"]
            )
            c["buffer_size"] = len(node.gp)
            per_node.append(c)
        return {
            "events": self._n_events,
            "ticks": len(self.ticks),
            "records_delivered": len(self.delivered),
            "nodes": per_node,
        }


def delay_trace(ticks, n_nodes: int):
    """Rows ``(tick, t, node, delta)``: age of each node's newest record in the set."""
    rows = []
    for j, tick in enumerate(ticks):
        newest = {}
        for r in tick.records:
            if r.node_id not in newest or r.iteration > newest[r.node_id].iteration:
                newest[r.node_id] = r
        for i in range(n_nodes):
            if i in newest:
                rows.append((j, tick.t, i, tick.t - newest[i].produced_at))
    return rows


def sorted_delay_view(ticks):
    """Per tick, the ages ``t - t_i^k`` of all records in the set, ascending."""
    return [(tick.t, tick.delays()) for tick in ticks]


def monotone_growth_segments(times, deltas, min_length: int = 3, tol: float = 1e-9):
    """Maximal runs where the delay grows exactly with elapsed time (a stale record aging).

    Returns ``(start, end)`` index pairs, inclusive, spanning at least
    ``min_length`` samples.
    """
    segments = []
    start = 0
    for j in range(1, len(deltas) + 1):
        grows = (
            j < len(deltas)
            and deltas[j] is not None
            and deltas[j - 1] is not None
            and abs((deltas[j] - deltas[j - 1]) - (times[j] - times[j - 1])) <= tol
        )
        if not grows:
            if j - start >= min_length:
                segments.append((start, j - 1))
            start = j
    return segments


def dump_jsonl(path, ticks, delivered):
    """Write delivered records and aggregation results as line-delimited JSON."""
    with open(path, "w") as fh:
        for r in delivered:
            fh.write(json.dumps({"record": r.to_dict()}, sort_keys=True) + "\n")
        for tick in ticks:
            for kind, res in tick.results.items():
                line = {
                    "t": tick.t,
                    "query_point": list(tick.query_point),
                    "truth": tick.truth,
                    "aggregation": None if res is None else res.to_dict(),
                    "kind": kind.value,
                }
                fh.write(json.dumps(line, sort_keys=True) + "\n")
