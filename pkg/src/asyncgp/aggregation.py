"""Aggregation of delayed expert predictions.

A coordinator keeps an *information set* of stale expert results
``(mu_i, sigma_i)`` evaluated at past query points ``x(t_i^k)``.  For the
current query ``x(t)`` each record gets a delayed error bound

    eta = L_f * sqrt(d(x(t), x(t_i^k))) + beta * sigma_i

and AsyncDGP fuses the records with weights ``omega_k^i = omega^2 rho_k^i
eta^-2`` plus a prior-mean weight ``omega_m = omega^2 (1 - rho) (beta
sigma_f)^-2``.  ``omega`` is then a deterministic bound on the fused error and
never exceeds the prior bound ``beta sigma_f``.

The five baselines (BCM, rBCM, POE, gPOE, MOE) apply their usual weighting
rules to the same information set.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ContractError, InputError, NotApplicableError, NumericError
from .gp import GPConfig
from .kernels import distance

__all__ = [
    "PredictionRecord",
    "InformationSet",
    "AggregationResult",
    "AggregatorKind",
    "delayed_error_bound",
    "record_etas",
    "responsibilities",
    "manage_information_set",
    "asyncdgp_aggregate",
    "baseline_aggregate",
    "aggregate",
    "aggregate_error_bound",
]


class AggregatorKind(str, Enum):
    ASYNCDGP = "asyncdgp"
    BCM = "bcm"
    RBCM = "rbcm"
    POE = "poe"
    GPOE = "gpoe"
    MOE = "moe"

    @classmethod
    def parse(cls, name) -> "AggregatorKind":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).strip().lower().replace("-", "").replace("_", ""))
        except ValueError:
            raise InputError(f"unknown aggregator {name!r}") from None


BASELINES = (AggregatorKind.BCM, AggregatorKind.RBCM, AggregatorKind.POE, AggregatorKind.GPOE, AggregatorKind.MOE)
RESPONSIBILITY_SCHEMES = ("log_ratio", "uniform", "capacity")
SELECTION_POLICIES = ("fresh_first", "eta")


@dataclass(frozen=True)
class PredictionRecord:
    """One expert result: node ``i``'s ``k``-th prediction at ``x(t_i^k)``."""

    node_id: int
    iteration: int
    query_point: tuple
    mean: float
    std: float
    produced_at: float
    received_at: float

    def __post_init__(self):
        object.__setattr__(self, "query_point", tuple(float(v) for v in np.atleast_1d(self.query_point)))
        if self.std < 0 or not math.isfinite(self.std):
            raise InputError(f"record std must be finite and >= 0, got {self.std!r}")
        if self.received_at < self.produced_at:
            raise InputError("record received before it was produced")

    @property
    def key(self):
        return (self.node_id, self.iteration)

    def to_dict(self) -> dict:
        return {
            "node_id": self.node_id,
            "iteration": self.iteration,
            "query_point": list(self.query_point),
            "mean": self.mean,
            "std": self.std,
            "produced_at": self.produced_at,
            "received_at": self.received_at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PredictionRecord":
        return cls(
            node_id=int(d["node_id"]),
            iteration=int(d["iteration"]),
            query_point=tuple(d["query_point"]),
            mean=float(d["mean"]),
            std=float(d["std"]),
            produced_at=float(d["produced_at"]),
            received_at=float(d["received_at"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class InformationSet:
    capacity: int
    records: list = field(default_factory=list)
    # k̄_i: newest iteration index per node among retained records
    latest_iteration: dict = field(default_factory=dict)

    def __post_init__(self):
        if int(self.capacity) != self.capacity or self.capacity < 1:
            raise InputError(f"information set capacity must be >= 1, got {self.capacity!r}")
        self.capacity = int(self.capacity)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


@dataclass
class AggregationResult:
    kind: AggregatorKind
    fused_mean: float
    weights: list
    prior_weight: float
    rho: float = None
    omega: float = None
    etas: list = field(default_factory=list)

    @property
    def weight_sum(self) -> float:
        return math.fsum(w for _, _, w in self.weights) + self.prior_weight

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "fused_mean": self.fused_mean,
            "weights": [[i, k, w] for i, k, w in self.weights],
            "prior_weight": self.prior_weight,
            "rho": self.rho,
            "omega": self.omega,
            "etas": list(self.etas),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AggregationResult":
        return cls(
            kind=AggregatorKind.parse(d["kind"]),
            fused_mean=float(d["fused_mean"]),
            weights=[(int(i), int(k), float(w)) for i, k, w in d["weights"]],
            prior_weight=float(d["prior_weight"]),
            rho=d.get("rho"),
            omega=d.get("omega"),
            etas=[float(e) for e in d.get("etas", [])],
        )


def delayed_error_bound(record: PredictionRecord, x_now, cfg: GPConfig, L_f=None) -> float:
    """Bound on ``|f(x_now) - mu_i(x(t_i^k))|`` for a stale record."""
    if L_f is None:
        L_f = cfg.L_f
    d = distance(cfg.kernel, x_now, record.query_point)
    if not math.isfinite(d):
        raise NumericError(f"non-finite kernel distance for record {record.key}")
    # the linear-kernel distance can be negative
    return L_f * math.sqrt(max(d, 0.0)) + cfg.beta * record.std


def record_etas(records, x_now, cfg: GPConfig, L_f=None) -> np.ndarray:
    if L_f is None:
        L_f = cfg.L_f
    return np.array([delayed_error_bound(r, x_now, cfg, L_f) for r in records], dtype=float)


def responsibilities(etas, bound: float, scheme: str = "log_ratio", capacity: int = None) -> np.ndarray:
    """Nonnegative responsibilities with sum <= 1 and zero where ``eta >= bound``.

    ``log_ratio``  normalised ``ln(bound / eta)``; sums to one on a non-empty set.
    ``uniform``    ``1 / |valid|``.
    ``capacity``   ``1 / capacity`` per valid record; a record's responsibility
                   does not depend on the others, so adding a record never
                   increases omega.
    """
    etas = np.asarray(etas, dtype=float)
    valid = etas < bound
    rho = np.zeros_like(etas)
    if not valid.any():
        return rho
    if scheme == "log_ratio":
        with np.errstate(divide="ignore"):
            logs = np.where(valid, np.log(bound / etas), 0.0)
        if np.isinf(logs).any():
            rho[np.isinf(logs)] = 1.0
            return rho / rho.sum()
        return logs / np.sum(np.maximum(logs[valid], 1e-300))
    if scheme == "uniform":
        rho[valid] = 1.0 / valid.sum()
        return rho
    if scheme == "capacity":
        if capacity is None or capacity < valid.sum():
            raise InputError("capacity scheme needs capacity >= number of valid records")
        rho[valid] = 1.0 / capacity
        return rho
    raise InputError(f"unknown responsibility scheme {scheme!r}")


def manage_information_set(
    iset: InformationSet,
    incoming,
    x_now,
    cfg: GPConfig,
    L_f=None,
    selection: str = "fresh_first",
) -> InformationSet:
    """Recompute every bound at ``x_now``, drop invalid records, enforce capacity.

    Records with ``eta >= beta sigma_f`` are discarded.  When more than
    ``capacity`` records survive, ``selection`` decides which are kept:

    ``fresh_first``  each node's newest surviving record first, then the rest,
                     each tier ordered by ascending eta.
    ``eta``          the ``capacity`` records with the smallest eta.
    """
    if selection not in SELECTION_POLICIES:
        raise InputError(f"unknown selection policy {selection!r}")
    if L_f is None:
        L_f = cfg.L_f
    pool = {r.key: r for r in iset.records}
    for r in incoming:
        pool[r.key] = r
    bound = cfg.prior_bound
    scored = []
    for r in pool.values():
        eta = delayed_error_bound(r, x_now, cfg, L_f)
        if eta < bound:
            scored.append((eta, r))

    newest = {}
    for _, r in scored:
        if r.node_id not in newest or r.iteration > newest[r.node_id]:
            newest[r.node_id] = r.iteration

    def rank(item):
        eta, r = item
        tier = 0
        if selection == "fresh_first" and newest[r.node_id] != r.iteration:
            tier = 1
        return (tier, eta, r.node_id, -r.iteration)

    kept = sorted(scored, key=rank)[: iset.capacity]
    records = sorted((r for _, r in kept), key=lambda r: r.key)
    latest = {}
    for r in records:
        latest[r.node_id] = max(latest.get(r.node_id, -1), r.iteration)
    return InformationSet(capacity=iset.capacity, records=records, latest_iteration=latest)


def _normalise(raw, means, prior_raw=0.0, prior_mean=0.0):
    """Weights ``raw / sum(raw)`` and the weighted mean, computed scale-free.

    Scaling by the largest magnitude first keeps a single dominant weight
    exactly one and equal weights exactly ``1/n``.
    """
    raw = np.asarray(raw, dtype=float)
    scale = max(np.max(np.abs(raw)) if raw.size else 0.0, abs(prior_raw))
    if not (scale > 0 and math.isfinite(scale)):
        raise NumericError("aggregation weights are degenerate")
    r = raw / scale
    rm = prior_raw / scale
    total = math.fsum(list(r) + [rm])
    if total == 0 or not math.isfinite(total):
        raise NumericError("aggregation weights sum to zero")
    fused = math.fsum([a * b for a, b in zip(r, means)] + [rm * prior_mean]) / total
    return r / total, rm / total, fused


def _weight_list(records, weights):
    return [(r.node_id, r.iteration, float(w)) for r, w in zip(records, weights)]


def asyncdgp_aggregate(
    iset: InformationSet,
    x_now,
    cfg: GPConfig,
    L_f=None,
    responsibility: str = "log_ratio",
    rho=None,
) -> AggregationResult:
    """Fuse a managed information set; ``omega`` bounds the fused error.

    ``rho`` overrides the responsibility scheme with explicit per-record
    values (nonnegative, summing to at most one).
    """
    records = list(iset.records)
    m = cfg.prior_mean
    bound = cfg.prior_bound
    if not records:
        return AggregationResult(AggregatorKind.ASYNCDGP, m, [], 1.0, 0.0, bound, [])
    etas = record_etas(records, x_now, cfg, L_f)
    if np.any(etas >= bound):
        bad = [r.key for r, e in zip(records, etas) if e >= bound]
        raise ContractError(f"records {bad} have eta >= beta*sigma_f; manage the information set first")
    if rho is None:
        rho = responsibilities(etas, bound, responsibility, iset.capacity)
    else:
        rho = np.asarray(rho, dtype=float)
        if rho.shape != etas.shape or np.any(rho < 0) or rho.sum() > 1 + 1e-12:
            raise InputError("explicit rho must be nonnegative, one per record, summing to <= 1")
    means = [r.mean for r in records]

    exact = etas == 0
    if exact.any():
        w = exact / exact.sum()
        fused = math.fsum(np.asarray(means)[exact]) / exact.sum()
        return AggregationResult(
            AggregatorKind.ASYNCDGP, fused, _weight_list(records, w), 0.0, 1.0, 0.0, etas.tolist()
        )

    rho_t = min(math.fsum(rho), 1.0)
    inv = etas**-2.0
    inv_b = bound**-2.0
    omega = (math.fsum(rho * (inv - inv_b)) + inv_b) ** -0.5
    w, wm, fused = _normalise(rho * inv, means, (1.0 - rho_t) * inv_b, m)
    return AggregationResult(
        AggregatorKind.ASYNCDGP, fused, _weight_list(records, w), float(wm), rho_t, float(omega), etas.tolist()
    )


def baseline_aggregate(kind, iset: InformationSet, x_now, cfg: GPConfig) -> AggregationResult:
    """BCM / rBCM / POE / gPOE / MOE weighting over the information set.

    No error bound is claimed, so ``omega`` stays ``None``.  Records with zero
    predictive std share the whole weight equally.
    """
    kind = AggregatorKind.parse(kind)
    if kind is AggregatorKind.ASYNCDGP:
        raise InputError("use asyncdgp_aggregate for AsyncDGP")
    records = list(iset.records)
    n = len(records)
    m = cfg.prior_mean
    sf = cfg.kernel.sigma_f
    if n == 0:
        if kind in (AggregatorKind.BCM, AggregatorKind.RBCM):
            return AggregationResult(kind, m, [], 1.0, 0.0)
        raise InputError(f"{kind.value} has no prior term and needs a non-empty information set")
    means = [r.mean for r in records]
    std = np.array([r.std for r in records], dtype=float)

    if kind is AggregatorKind.MOE:
        w = np.full(n, 1.0 / n)
        return AggregationResult(kind, math.fsum(means) / n, _weight_list(records, w), 0.0)

    zero = std == 0
    if zero.any():
        w = zero / zero.sum()
        fused = math.fsum(np.asarray(means)[zero]) / zero.sum()
        return AggregationResult(kind, fused, _weight_list(records, w), 0.0)

    prec = std**-2.0
    prec_f = sf**-2.0
    if kind is AggregatorKind.BCM:
        rho_t = float(n)
        w, wm, fused = _normalise(prec, means, (1.0 - rho_t) * prec_f, m)
    elif kind is AggregatorKind.RBCM:
        rho = np.log(sf / std)
        rho_t = math.fsum(rho)
        w, wm, fused = _normalise(rho * prec, means, (1.0 - rho_t) * prec_f, m)
    elif kind is AggregatorKind.POE:
        rho_t = None
        w, wm, fused = _normalise(prec, means)
    else:
        rho = np.log(sf / std)
        rho_t = math.fsum(rho)
        raw = rho * prec
        if not np.any(raw != 0):
            # every expert at prior variance: fall back to equal weights
            raw = np.ones(n)
        w, wm, fused = _normalise(raw, means)
    return AggregationResult(kind, fused, _weight_list(records, w), float(wm), rho_t)


def aggregate(kind, iset: InformationSet, x_now, cfg: GPConfig, L_f=None, responsibility="log_ratio"):
    kind = AggregatorKind.parse(kind)
    if kind is AggregatorKind.ASYNCDGP:
        return asyncdgp_aggregate(iset, x_now, cfg, L_f, responsibility)
    return baseline_aggregate(kind, iset, x_now, cfg)


def aggregate_error_bound(result: AggregationResult) -> float:
    if result.kind is not AggregatorKind.ASYNCDGP or result.omega is None:
        raise NotApplicableError(f"{result.kind.value} results carry no error bound")
    return result.omega
