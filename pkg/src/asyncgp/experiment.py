"""Scenario assembly and experiment runners (regression and control)."""

from __future__ import annotations

import copy
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .aggregation import AggregatorKind, aggregate_error_bound
from .control import (
    FeedbackLinearizingController,
    NetworkFeed,
    Plant,
    SinusoidReference,
    build_error_system,
    simulate_tracking,
    tracking_bound,
    ultimate_bound,
    write_tracking_csv,
)
from .errors import InputError
from .gp import GPConfig, OnlineGP
from .kernels import KernelSpec
from .simnet import (
    ComputeModel,
    DelaySampler,
    NetworkSimulator,
    NodeConfig,
    TickLog,
    delay_trace,
    dump_jsonl,
    record_stream_hash,
)
from .streams import CsvStream, SyntheticStream, random_kernel_expansion

# maximal data samples / local models / overlap rate of the four reference nodes
TABLE2 = [
    {"max_data": 100, "max_local_models": 100, "overlap_rate": 0.01},
    {"max_data": 50, "max_local_models": 200, "overlap_rate": 0.01},
    {"max_data": 500, "max_local_models": 50, "overlap_rate": 0.01},
    {"max_data": 1000, "max_local_models": 20, "overlap_rate": 0.01},
]

_NODE_DEFAULTS = {
    "listen_hz": 1000.0,
    "compute": {"model": "affine", "base_s": 1e-3, "per_point_s": 5e-6},
    "uplink": {"distribution": "uniform", "lo": 1e-3, "hi": 5e-3},
    "downlink": {"distribution": "uniform", "lo": 1e-3, "hi": 5e-3},
    "queueing": "latest",
}


def preset(name: str) -> dict:
    """Configuration dictionaries for the named presets."""
    if name == "table2":
        return {
            "preset": "table2",
            "mode": "regression",
            "seed": 0,
            "duration_s": 10.0,
            "broadcast_interval_s": 0.02,
            "info_capacity": 4,
            "aggregator": "asyncdgp",
            "selection": "fresh_first",
            "responsibility": "log_ratio",
            "routing": "round_robin",
            "kernel": {"family": "ardse", "sigma_f": 1.0, "lengthscales": [1.0, 1.0]},
            "gp": {"noise_std": 0.01, "prior_mean": 0.0, "beta": 2.0, "gamma": 1.0},
            "nodes": [dict(_NODE_DEFAULTS, **row) for row in TABLE2],
            "stream": {"type": "synthetic", "n_centers": 12, "box": [-3.0, 3.0], "sample_rate": 50.0,
                       "noise_std": 0.01, "warmup": 400},
        }
    if name == "stalled":
        # node 0 takes 0.1 s per prediction while queries arrive every 0.02 s
        cfg = preset("table2")
        cfg["preset"] = "stalled"
        cfg["nodes"][0] = dict(cfg["nodes"][0], compute={"model": "constant", "seconds": 0.1}, queueing="fifo")
        return cfg
    if name == "control":
        cfg = preset("table2")
        cfg.update(
            preset="control",
            mode="control",
            duration_s=20.0,
            kernel={"family": "se", "sigma_f": 1.0, "sigma_l": 1.0, "dim": 2},
            control={"runs": 100, "step": 0.002, "gains": [10.0, 7.0], "n_train": 1000,
                     "n_bumps": 3, "box": [-3.0, 3.0], "amplitude": [0.4, 0.6], "period": [3.0, 5.0],
                     "x0_box": [0.0, 1.0], "settle_s": 0.1},
        )
        cfg.pop("stream")
        return cfg
    raise InputError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")


PRESETS = ("table2", "stalled", "control")


@dataclass
class ScenarioConfig:
    nodes: list
    coordinator: GPConfig
    broadcast_interval_s: float = 0.02
    info_capacity: int = 4
    aggregators: list = field(default_factory=lambda: [AggregatorKind.ASYNCDGP])
    stream: dict = field(default_factory=dict)
    seed: int = 0
    mode: str = "regression"
    duration_s: float = 10.0
    selection: str = "fresh_first"
    responsibility: str = "log_ratio"
    routing: str = "round_robin"
    control: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = copy.deepcopy(d)
        nodes_raw = d.get("nodes") or []
        if not nodes_raw:
            raise InputError("scenario needs at least one node")
        seed = int(d.get("seed", 0))
        kern = dict(d.get("kernel", {"family": "se"}))
        kernel = KernelSpec.from_params(kern.pop("family"), **kern)
        gp_base = dict(d.get("gp", {}))
        nodes = []
        for i, nd in enumerate(nodes_raw):
            nd = dict(_NODE_DEFAULTS, **nd)
            gp_kw = dict(gp_base)
            for key in ("max_data", "max_local_models", "overlap_rate"):
                if key in nd:
                    gp_kw[key] = nd[key]
            gpc = GPConfig(kernel=kernel, **gp_kw)
            nodes.append(
                NodeConfig(
                    gp=gpc,
                    listen_hz=float(nd["listen_hz"]),
                    compute=ComputeModel.from_dict(nd["compute"]),
                    uplink=DelaySampler.from_dict(nd["uplink"]).with_seed(seed, i, 0),
                    downlink=DelaySampler.from_dict(nd["downlink"]).with_seed(seed, i, 1),
                    queueing=nd.get("queueing", "latest"),
                )
            )
        agg = d.get("aggregator", "asyncdgp")
        if agg == "all":
            aggs = list(AggregatorKind)
        else:
            aggs = [AggregatorKind.parse(a) for a in (agg if isinstance(agg, list) else [agg])]
        mode = d.get("mode", "regression")
        if mode not in ("regression", "control"):
            raise InputError(f"mode must be regression or control, got {mode!r}")
        interval = float(d.get("broadcast_interval_s", 0.02))
        capacity = int(d.get("info_capacity", 4))
        duration = float(d.get("duration_s", 10.0))
        if not interval > 0 or capacity < 1 or not duration > 0:
            raise InputError("broadcast_interval_s, info_capacity and duration_s must be positive")
        return cls(
            nodes=nodes,
            coordinator=GPConfig(kernel=kernel, **{k: v for k, v in gp_base.items() if k != "max_data"}),
            broadcast_interval_s=interval,
            info_capacity=capacity,
            aggregators=aggs,
            stream=d.get("stream", {}),
            seed=seed,
            mode=mode,
            duration_s=duration,
            selection=d.get("selection", "fresh_first"),
            responsibility=d.get("responsibility", "log_ratio"),
            routing=d.get("routing", "round_robin"),
            control=d.get("control", {}),
            raw=d,
        )

    @property
    def kernel(self) -> KernelSpec:
        return self.coordinator.kernel


def build_stream(cfg: ScenarioConfig):
    s = dict(cfg.stream)
    kind = s.pop("type", "synthetic")
    if kind == "synthetic":
        return SyntheticStream(kernel=cfg.kernel, gamma=cfg.coordinator.gamma, seed=cfg.seed, **s)
    if kind == "csv":
        stream = CsvStream(path=s["path"], inputs=s["inputs"], target=s["target"],
                           interval=cfg.broadcast_interval_s, warmup=int(s.get("warmup", 0)), seed=cfg.seed)
        if stream.dim != cfg.kernel.dim:
            raise InputError(f"dataset has {stream.dim} inputs but the kernel has dim={cfg.kernel.dim}")
        return stream
    raise InputError(f"unknown stream type {kind!r}")


def run_regression(cfg: ScenarioConfig, aggregators=None):
    """Run one simulation evaluating every requested aggregator on the same information set."""
    stream = build_stream(cfg)
    sim = NetworkSimulator(
        cfg.nodes,
        stream.query,
        cfg.duration_s,
        cfg.broadcast_interval_s,
        cfg.info_capacity,
        aggregators or cfg.aggregators,
        stream.samples(cfg.duration_s, len(cfg.nodes), cfg.routing),
        coordinator_cfg=cfg.coordinator,
        selection=cfg.selection,
        responsibility=cfg.responsibility,
    )
    return sim.run(), stream


def aggregator_metrics(ticks, kind: AggregatorKind) -> dict:
    errs, omegas, violations, empty = [], [], 0, 0
    for tick in ticks:
        res = tick.results.get(kind)
        if res is None:
            empty += 1
            continue
        if tick.truth is None:
            continue
        err = abs(tick.truth - res.fused_mean)
        errs.append(err)
        if kind is AggregatorKind.ASYNCDGP:
            om = aggregate_error_bound(res)
            omegas.append(om)
            if err > om:
                violations += 1
    errs = np.array(errs)
    out = {
        "aggregator": kind.value,
        "ticks": len(ticks),
        "empty_ticks": empty,
        "mse": float(np.mean(errs**2)) if errs.size else None,
        "mae": float(np.mean(errs)) if errs.size else None,
        "mean_omega": float(np.mean(omegas)) if omegas else None,
        "max_omega": float(np.max(omegas)) if omegas else None,
        "violations": violations if kind is AggregatorKind.ASYNCDGP else None,
    }
    return out


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join("" if v is None else repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")


def output_root(out=None) -> Path:
    return Path(out or os.environ.get("ASYNCGP_OUT") or "runs")


def run_dir_name(cfg: ScenarioConfig, kind) -> str:
    name = cfg.raw.get("preset") or "custom"
    return f"{name}-{kind.value if hasattr(kind, 'value') else kind}-ibar{cfg.info_capacity}-seed{cfg.seed}"


def write_regression_artifacts(run_dir: Path, cfg: ScenarioConfig, result, stream, kind: AggregatorKind):
    run_dir.mkdir(parents=True, exist_ok=True)
    resolved = copy.deepcopy(cfg.raw)
    resolved["aggregator"] = kind.value
    resolved["stream_resolved"] = stream.describe()
    (run_dir / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")

    _write_csv(run_dir / "delays.csv", ["tick", "t", "node", "delay"], delay_trace(result.ticks, len(cfg.nodes)))
    cap = cfg.info_capacity
    rows = []
    for j, tick in enumerate(result.ticks):
        d = tick.delays()
        rows.append([j, tick.t] + d + [None] * (cap - len(d)))
    _write_csv(run_dir / "sorted_delays.csv", ["tick", "t"] + [f"slot{s}" for s in range(cap)], rows)

    ticks = [_only(tick, kind) for tick in result.ticks]
    dump_jsonl(run_dir / "predictions.jsonl", ticks, result.delivered)

    metrics = aggregator_metrics(result.ticks, kind)
    metrics["stream_hash"] = record_stream_hash(result.delivered)
    metrics["seed"] = cfg.seed
    metrics["simulation"] = result.metrics
    (run_dir / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return metrics


def _only(tick, kind):
    return TickLog(tick.t, tick.query_point, tick.truth, tick.records, {kind: tick.results.get(kind)})


def run_experiment(config: dict, out=None, runs=None) -> list:
    """Run a scenario and write one run directory per aggregator; returns the directories."""
    cfg = ScenarioConfig.from_dict(config)
    root = output_root(out)
    if cfg.mode == "control":
        run_dir = root / run_dir_name(cfg, cfg.aggregators[0])
        run_control_experiment(cfg, run_dir, runs=runs)
        return [run_dir]
    result, stream = run_regression(cfg)
    dirs = []
    for kind in cfg.aggregators:
        run_dir = root / run_dir_name(cfg, kind)
        write_regression_artifacts(run_dir, cfg, result, stream, kind)
        dirs.append(run_dir)
    return dirs


def compare_report(run_dirs) -> list:
    """Per-aggregator summary rows for runs that consumed the same record stream."""
    rows = []
    hashes = set()
    for d in run_dirs:
        path = Path(d) / "metrics.json"
        if not path.exists():
            raise InputError(f"{d}: no metrics.json")
        m = json.loads(path.read_text())
        hashes.add(m.get("stream_hash"))
        rows.append({k: m.get(k) for k in ("aggregator", "mse", "mae", "mean_omega", "max_omega", "violations")}
                    | {"run": str(d)})
    if len(hashes) > 1:
        raise InputError("runs consumed different prediction streams; comparison refused")
    return rows


def format_table(rows) -> str:
    cols = ["aggregator", "mse", "mae", "mean_omega", "max_omega", "violations"]

    def fmt(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.6g}"
        return str(v)

    table = [cols] + [[fmt(r.get(c)) for c in cols] for r in rows]
    widths = [max(len(line[j]) for line in table) for j in range(len(cols))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(line, widths)) for line in table)


# -- control -----------------------------------------------------------------


def run_control_trial(cfg: ScenarioConfig, trial: int, keep_run: bool = False) -> dict:
    """One closed-loop run with a freshly drawn reference and initial state."""
    c = dict(preset("control")["control"], **cfg.control)
    rng = np.random.default_rng([cfg.seed, trial, 101])
    kernel = cfg.kernel
    f = random_kernel_expansion(kernel, int(c["n_bumps"]), c["box"], 0.999 * cfg.coordinator.gamma,
                                np.random.default_rng([cfg.seed, 7]))
    lo, hi = c["box"]
    X = rng.uniform(lo, hi, size=(int(c["n_train"]), kernel.dim))
    noise = cfg.coordinator.noise_std
    y = f.batch(X) + noise * rng.standard_normal(len(X))
    gps = []
    for i, node in enumerate(cfg.nodes):
        gps.append(OnlineGP(node.gp).fit(X[i :: len(cfg.nodes)], y[i :: len(cfg.nodes)]))
    nodes = [
        NodeConfig(n.gp, n.listen_hz, n.compute, n.uplink.with_seed(cfg.seed, trial, i, 0),
                   n.downlink.with_seed(cfg.seed, trial, i, 1), n.queueing)
        for i, n in enumerate(cfg.nodes)
    ]
    kind = cfg.aggregators[0]

    def make_sim(query_fn, on_aggregate):
        return NetworkSimulator(nodes, query_fn, cfg.duration_s, cfg.broadcast_interval_s, cfg.info_capacity,
                                [kind], coordinator_cfg=cfg.coordinator, selection=cfg.selection,
                                responsibility=cfg.responsibility, on_aggregate=on_aggregate, gps=gps)

    feed = NetworkFeed(make_sim, f, kind)
    ref = SinusoidReference(rng.uniform(*c["amplitude"]), rng.uniform(*c["period"]))
    x0 = rng.uniform(c["x0_box"][0], c["x0_box"][1], size=kernel.dim)
    sys = build_error_system(c["gains"])
    run = simulate_tracking(Plant(f, kernel.dim), FeedbackLinearizingController(c["gains"]), feed,
                            cfg.duration_s, float(c["step"]), ref, x0, cfg.broadcast_interval_s)
    e = run.e_norm
    bound = run.bound(sys)
    tail = e[int(0.75 * len(e)) :]
    # restart after the network has answered: tighter omega_bar than the empty-set prior bound
    k0, om_settled = run.restarted(float(c.get("settle_s", 0.1)))
    bound_settled = tracking_bound(sys, float(e[k0]), om_settled, run.t[k0:], float(run.t[k0]))
    out = {
        "trial": trial,
        "amplitude": ref.amplitude,
        "period": ref.period,
        "x0": x0.tolist(),
        "mean_tracking_error": float(np.mean(e)),
        "max_tracking_error": float(np.max(e)),
        "mean_prediction_error": float(np.mean(run.pred_error)),
        "max_prediction_error": float(np.max(run.pred_error)),
        "omega_bar": run.omega_bar,
        "premise_held": run.premise_held(),
        "max_bound_ratio": float(np.max(e / bound)),
        "tail_sup_error": float(np.max(tail)),
        "ultimate_bound": ultimate_bound(sys, run.omega_bar),
        "omega_bar_settled": om_settled,
        "premise_held_settled": bool(np.all(run.pred_error[k0:] <= om_settled)),
        "max_bound_ratio_settled": float(np.max(e[k0:] / bound_settled)),
        "ultimate_bound_settled": ultimate_bound(sys, om_settled),
    }
    if keep_run:
        out["_run"] = run
        out["_sys"] = sys
    return out


def run_control_experiment(cfg: ScenarioConfig, run_dir: Path, runs=None) -> dict:
    c = dict(preset("control")["control"], **cfg.control)
    runs = int(runs if runs is not None else c["runs"])
    run_dir.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    trials, e_series, p_series = [], [], []
    for trial in range(runs):
        res = run_control_trial(cfg, trial, keep_run=True)
        run, sys = res.pop("_run"), res.pop("_sys")
        if trial == 0:
            write_tracking_csv(run_dir / "tracking.csv", run, sys)
        e_series.append(run.e_norm[run.tick_mask])
        p_series.append(run.pred_error[run.tick_mask])
        trials.append(res)
    e_series, p_series = np.array(e_series), np.array(p_series)
    summary = {
        "runs": runs,
        "seed": cfg.seed,
        "per_run": trials,
        "aggregate": {
            key: {"mean": float(np.mean([t[key] for t in trials])), "var": float(np.var([t[key] for t in trials]))}
            for key in ("mean_tracking_error", "max_tracking_error", "mean_prediction_error", "max_prediction_error")
        },
        "per_tick": {
            "tracking_error_mean": e_series.mean(axis=0).tolist(),
            "tracking_error_var": e_series.var(axis=0).tolist(),
            "prediction_error_mean": p_series.mean(axis=0).tolist(),
            "prediction_error_var": p_series.var(axis=0).tolist(),
        },
        "bound_checks": {
            "all_premises_held": all(t["premise_held"] for t in trials),
            "max_bound_ratio": max(t["max_bound_ratio"] for t in trials),
            "tail_within_ultimate": all(t["tail_sup_error"] <= 1.01 * t["ultimate_bound"] for t in trials),
            "all_settled_premises_held": all(t["premise_held_settled"] for t in trials),
            "max_bound_ratio_settled": max(t["max_bound_ratio_settled"] for t in trials),
            "tail_within_settled_ultimate": all(
                t["tail_sup_error"] <= 1.01 * t["ultimate_bound_settled"] for t in trials
            ),
        },
    }
    resolved = copy.deepcopy(cfg.raw)
    resolved["control"] = c
    (run_dir / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    (run_dir / "montecarlo_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    # kept apart so the summary stays byte-reproducible
    wall = time.perf_counter() - started
    (run_dir / "timing.json").write_text(json.dumps({"runs": runs, "wall_time_s": wall}) + "\n")
    summary["wall_time_s"] = wall
    return summary
