"""Training/query streams: synthetic RKHS functions and user CSV datasets."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .kernels import KernelSpec, kernel_matrix


@dataclass
class KernelExpansion:
    """``f(x) = sum_j a_j k(x, z_j)``; its RKHS norm is ``sqrt(a^T K a)``."""

    spec: KernelSpec
    centers: np.ndarray
    coeffs: np.ndarray

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        self.coeffs = np.asarray(self.coeffs, dtype=float).reshape(-1)
        if self.centers.shape != (len(self.coeffs), self.spec.dim):
            raise InputError("centers must be (n_centers, dim) matching coeffs")

    @property
    def rkhs_norm(self) -> float:
        K = kernel_matrix(self.spec, self.centers)
        return math.sqrt(max(float(self.coeffs @ K @ self.coeffs), 0.0))

    def __call__(self, x) -> float:
        x = np.asarray(x, dtype=float).reshape(1, -1)
        return float(kernel_matrix(self.spec, x, self.centers)[0] @ self.coeffs)

    def batch(self, X) -> np.ndarray:
        return kernel_matrix(self.spec, np.atleast_2d(X), self.centers) @ self.coeffs


def random_kernel_expansion(spec: KernelSpec, n_centers: int, box, norm: float, rng) -> KernelExpansion:
    """Random expansion with centers uniform in ``box`` and RKHS norm exactly ``norm``."""
    lo, hi = _box(box, spec.dim)
    centers = rng.uniform(lo, hi, size=(n_centers, spec.dim))
    coeffs = rng.standard_normal(n_centers)
    f = KernelExpansion(spec, centers, coeffs)
    f.coeffs = f.coeffs * (norm / f.rkhs_norm)
    return f


def _box(box, dim):
    lo, hi = np.broadcast_to(np.asarray(box[0], dtype=float), (dim,)), np.broadcast_to(
        np.asarray(box[1], dtype=float), (dim,)
    )
    if np.any(hi <= lo):
        raise InputError("domain box must have lo < hi")
    return lo, hi


@dataclass
class SyntheticStream:
    """Smooth query trajectory through ``box`` over a random RKHS function.

    Queries follow ``x(t) = mid + half * sin(2 pi t / T_j + phi_j)`` per
    coordinate; noisy training samples are taken along the same trajectory at
    ``sample_rate`` Hz.  ``warmup`` extra samples are drawn uniformly in the box
    before time zero.
    """

    kernel: KernelSpec
    gamma: float = 1.0
    n_centers: int = 12
    box: tuple = (-3.0, 3.0)
    sample_rate: float = 50.0
    noise_std: float = 0.05
    warmup: int = 0
    seed: int = 0
    f: KernelExpansion = field(init=False, repr=False)

    def __post_init__(self):
        rng = np.random.default_rng([self.seed, 17])
        # scale slightly below gamma so the norm bound holds after rounding
        self.f = random_kernel_expansion(self.kernel, self.n_centers, self.box, 0.999 * self.gamma, rng)
        lo, hi = _box(self.box, self.kernel.dim)
        self._mid, self._half = (lo + hi) / 2, 0.9 * (hi - lo) / 2
        self._periods = rng.uniform(6.0, 15.0, self.kernel.dim)
        self._phases = rng.uniform(0, 2 * np.pi, self.kernel.dim)
        self._rng = np.random.default_rng([self.seed, 23])

    def x_at(self, t: float) -> np.ndarray:
        return self._mid + self._half * np.sin(2 * np.pi * t / self._periods + self._phases)

    def query(self, t: float):
        x = self.x_at(t)
        return x, self.f(x)

    def samples(self, duration: float, n_nodes: int, routing: str = "round_robin"):
        from .simnet import StreamItem

        rng = self._rng
        items = []
        lo, hi = _box(self.box, self.kernel.dim)
        j = 0
        for _ in range(self.warmup):
            x = rng.uniform(lo, hi)
            items.append(StreamItem(0.0, x, self.f(x) + self.noise_std * rng.standard_normal(), _route(j, n_nodes, routing)))
            j += 1
        n = int(math.floor(duration * self.sample_rate + 1e-9))
        for s in range(n + 1):
            t = s / self.sample_rate
            x = self.x_at(t)
            items.append(StreamItem(t, x, self.f(x) + self.noise_std * rng.standard_normal(), _route(j, n_nodes, routing)))
            j += 1
        return items

    def describe(self) -> dict:
        return {
            "type": "synthetic",
            "gamma": self.gamma,
            "n_centers": self.n_centers,
            "box": list(self.box),
            "sample_rate": self.sample_rate,
            "noise_std": self.noise_std,
            "warmup": self.warmup,
            "seed": self.seed,
            "rkhs_norm": self.f.rkhs_norm,
        }


def _route(j, n_nodes, routing):
    if routing == "broadcast":
        return tuple(range(n_nodes))
    if routing == "round_robin":
        return (j % n_nodes,)
    raise InputError(f"unknown routing {routing!r}")


def read_csv_dataset(path, inputs, target):
    """Load ``(X, y)`` from a CSV with a header row.

    Raises :class:`InputError` naming the file line of the first bad row.
    """
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise InputError(f"cannot read dataset {path}: {exc}") from None
    with fh:
        reader = csv.DictReader(fh)
        missing = [c for c in list(inputs) + [target] if c not in (reader.fieldnames or [])]
        if missing:
            raise InputError(f"{path}: missing columns {missing}")
        X, y = [], []
        for row in reader:
            line = reader.line_num
            try:
                vals = [float(row[c]) for c in inputs]
                yv = float(row[target])
            except (TypeError, ValueError):
                raise InputError(f"{path}:{line}: malformed row") from None
            if not all(math.isfinite(v) for v in vals + [yv]):
                raise InputError(f"{path}:{line}: non-finite value")
            X.append(vals)
            y.append(yv)
    if not X:
        raise InputError(f"{path}: no data rows")
    return np.array(X), np.array(y)


@dataclass
class CsvStream:
    """Rows streamed in seeded shuffled order, one query per broadcast tick.

    Row ``j`` is queried at tick ``j`` and becomes a training sample one
    broadcast interval later (its label arrives after the prediction).
    """

    path: str
    inputs: list
    target: str
    interval: float = 0.02
    warmup: int = 0
    seed: int = 0

    def __post_init__(self):
        X, y = read_csv_dataset(self.path, self.inputs, self.target)
        order = np.random.default_rng([self.seed, 29]).permutation(len(y))
        self.X, self.y = X[order], y[order]

    @property
    def dim(self):
        return self.X.shape[1]

    def _row(self, t):
        j = self.warmup + int(round(t / self.interval))
        if j >= len(self.y):
            raise InputError(f"{self.path}: dataset exhausted at t={t:.3f}s")
        return j

    def query(self, t: float):
        j = self._row(t)
        return self.X[j], float(self.y[j])

    def samples(self, duration: float, n_nodes: int, routing: str = "round_robin"):
        from .simnet import StreamItem

        items = [StreamItem(0.0, self.X[j], float(self.y[j]), _route(j, n_nodes, routing)) for j in range(min(self.warmup, len(self.y)))]
        n = int(math.floor(duration / self.interval + 1e-9))
        for s in range(n + 1):
            j = self.warmup + s
            if j >= len(self.y):
                break
            items.append(StreamItem((s + 1) * self.interval, self.X[j], float(self.y[j]), _route(j, n_nodes, routing)))
        return items

    def describe(self) -> dict:
        return {
            "type": "csv",
            "path": str(self.path),
            "inputs": list(self.inputs),
            "target": self.target,
            "warmup": self.warmup,
            "seed": self.seed,
        }
