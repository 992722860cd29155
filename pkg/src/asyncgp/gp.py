"""Per-node online GP regression on a capped, oldest-first training buffer."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import InputError, NumericError
from .kernels import KernelSpec, f_lipschitz, kernel_matrix, lipschitz_constant

JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


@dataclass
class GPConfig:
    """Hyperparameters of one node's GP expert.

    ``max_local_models`` and ``overlap_rate`` describe a local-model tree
    expert; they are kept for configuration fidelity but the capped exact GP
    used here ignores them.
    """

    kernel: KernelSpec
    noise_std: float = 0.05
    prior_mean: float = 0.0
    beta: float = 2.0
    gamma: float = 1.0
    max_data: int = 100
    max_local_models: int = None
    overlap_rate: float = None

    def __post_init__(self):
        if not isinstance(self.kernel, KernelSpec):
            raise InputError("kernel must be a KernelSpec")
        for name in ("noise_std", "beta", "gamma"):
            v = float(getattr(self, name))
            if not (math.isfinite(v) and v > 0):
                raise InputError(f"{name} must be positive, got {v!r}")
            setattr(self, name, v)
        if self.gamma > self.beta:
            # the prior alone must satisfy |f - m| <= beta * sigma_f
            raise InputError(f"gamma ({self.gamma}) must not exceed beta ({self.beta})")
        self.prior_mean = float(self.prior_mean)
        if not math.isfinite(self.prior_mean):
            raise InputError("prior_mean must be finite")
        if int(self.max_data) != self.max_data or self.max_data < 1:
            raise InputError(f"max_data must be a positive integer, got {self.max_data!r}")
        self.max_data = int(self.max_data)

    @property
    def prior_bound(self) -> float:
        """``beta * sigma_f``: error bound of the prior mean."""
        return self.beta * self.kernel.sigma_f

    @property
    def L_f(self) -> float:
        return f_lipschitz(self.gamma, lipschitz_constant(self.kernel))

    def to_dict(self) -> dict:
        return {
            "kernel": self.kernel.to_dict(),
            "noise_std": self.noise_std,
            "prior_mean": self.prior_mean,
            "beta": self.beta,
            "gamma": self.gamma,
            "max_data": self.max_data,
            "max_local_models": self.max_local_models,
            "overlap_rate": self.overlap_rate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GPConfig":
        d = dict(d)
        kern = d.pop("kernel")
        if isinstance(kern, dict):
            kern = dict(kern)
            kern = KernelSpec.from_params(kern.pop("family"), **kern)
        return cls(kernel=kern, **d)


@dataclass(frozen=True)
class Posterior:
    mean: float
    std: float


def error_bound(cfg: GPConfig, post: Posterior) -> float:
    """Confidence bound ``beta * sigma`` on ``|f(x) - mu(x)|``."""
    return cfg.beta * post.std


def chol_rank1_update(L: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of ``L L^T + v v^T``."""
    L = L.copy()
    v = v.astype(float, copy=True)
    n = L.shape[0]
    for k in range(n):
        lkk = L[k, k]
        r = math.hypot(lkk, v[k])
        c, s = r / lkk, v[k] / lkk
        L[k, k] = r
        if k + 1 < n:
            L[k + 1 :, k] = (L[k + 1 :, k] + s * v[k + 1 :]) / c
            v[k + 1 :] = c * v[k + 1 :] - s * L[k + 1 :, k]
    return L


class OnlineGP:
    """Exact GP whose training buffer keeps the ``cfg.max_data`` newest samples.

    The Cholesky factor of ``K + sigma_n^2 I`` is maintained incrementally:
    appending a sample extends it by one row, evicting the oldest sample is a
    rank-one update of the trailing block.
    """

    def __init__(self, cfg: GPConfig):
        self.cfg = cfg
        self.spec = cfg.kernel
        self._X = np.empty((0, self.spec.dim))
        self._y = np.empty(0)
        self._L = np.empty((0, 0))
        self._alpha = None
        self.jitter = 0.0

    def __len__(self):
        return len(self._y)

    @property
    def X(self) -> np.ndarray:
        return self._X

    @property
    def y(self) -> np.ndarray:
        return self._y

    @property
    def capacity(self) -> int:
        return self.cfg.max_data

    def _validate(self, x, y):
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.shape != (self.spec.dim,):
            raise InputError(f"x has shape {x.shape}, expected ({self.spec.dim},)")
        if not (np.all(np.isfinite(x)) and math.isfinite(y)):
            raise InputError("training sample must be finite")
        return x, float(y)

    def _noise_diag(self):
        return self.cfg.noise_std**2 + self.jitter

    def _refactor(self):
        n = len(self._y)
        if n == 0:
            self._L = np.empty((0, 0))
            return
        K = kernel_matrix(self.spec, self._X)
        base = self.cfg.noise_std**2
        for jitter in JITTER_LADDER:
            if jitter < self.jitter:
                continue
            try:
                self._L = np.linalg.cholesky(K + (base + jitter) * np.eye(n))
                self.jitter = jitter
                return
            except np.linalg.LinAlgError:
                continue
        raise NumericError(f"Cholesky failed on {n} points with jitter up to {JITTER_LADDER[-1]:g}")

    def update(self, x, y) -> "OnlineGP":
        """Add one sample, evicting the oldest one when the buffer is full."""
        x, y = self._validate(x, y)
        if len(self._y) >= self.capacity:
            self._X, self._y = self._X[1:], self._y[1:]
            if len(self._y):
                self._L = chol_rank1_update(self._L[1:, 1:], self._L[1:, 0])
            else:
                self._L = np.empty((0, 0))
        self._alpha = None
        n = len(self._y)
        kxx = float(kernel_matrix(self.spec, x[None, :])[0, 0])
        if n == 0:
            self._X, self._y = x[None, :], np.array([y])
            self._L = np.array([[math.sqrt(kxx + self._noise_diag())]])
            return self
        k = kernel_matrix(self.spec, self._X, x[None, :])[:, 0]
        l = solve_triangular(self._L, k, lower=True, check_finite=False)
        d2 = kxx + self._noise_diag() - l @ l
        self._X = np.vstack([self._X, x])
        self._y = np.append(self._y, y)
        if d2 > 0 and math.isfinite(d2):
            L = np.zeros((n + 1, n + 1))
            L[:n, :n] = self._L
            L[n, :n] = l
            L[n, n] = math.sqrt(d2)
            self._L = L
        else:
            self._refactor()
        return self

    def fit(self, X, y) -> "OnlineGP":
        """Replace the buffer with the newest ``max_data`` rows of ``(X, y)``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float).reshape(-1)
        if X.shape[1] != self.spec.dim or len(X) != len(y):
            raise InputError("X must be (n, dim) and y must have n entries")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise InputError("training data must be finite")
        self._X, self._y = X[-self.capacity :].copy(), y[-self.capacity :].copy()
        self._alpha = None
        self._refactor()
        return self

    def predict(self, x) -> Posterior:
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.shape != (self.spec.dim,):
            raise InputError(f"x has shape {x.shape}, expected ({self.spec.dim},)")
        m = self.cfg.prior_mean
        kxx = float(kernel_matrix(self.spec, x[None, :])[0, 0])
        prior_std = math.sqrt(max(kxx, 0.0))
        if len(self._y) == 0:
            return Posterior(m, prior_std)
        if self._alpha is None:
            self._alpha = cho_solve((self._L, True), self._y - m, check_finite=False)
        k = kernel_matrix(self.spec, self._X, x[None, :])[:, 0]
        mean = m + float(k @ self._alpha)
        v = solve_triangular(self._L, k, lower=True, check_finite=False)
        var = kxx - float(v @ v)
        std = min(math.sqrt(max(var, 0.0)), prior_std)
        if not math.isfinite(mean):
            raise NumericError("non-finite posterior mean")
        return Posterior(mean, std)
