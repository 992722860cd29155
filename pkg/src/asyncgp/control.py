"""Feedback-linearising tracking control with a learned drift estimate.

Plant (chain of integrators, control affine)::

    x_1' = x_2, ..., x_{n-1}' = x_n,   x_n' = f(x) + u

Controller ``u = -f_hat + r^(n)(t) - gains . e`` with ``e = x - (r, r', ...)``
gives the error dynamics ``e' = A e + b (f(x) - f_hat)`` where ``A`` is the
companion matrix with last row ``-gains``.  If ``|f - f_hat| <= omega_bar``
then ``||e(t)||`` is bounded by :func:`tracking_bound`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, InputError, NumericError


@dataclass
class ErrorSystem:
    gains: np.ndarray
    A: np.ndarray
    b: np.ndarray
    Q: np.ndarray
    Lambda: np.ndarray
    lambda_bar: float
    condQ: float

    @property
    def n(self):
        return len(self.gains)

    def residual(self) -> float:
        return float(np.linalg.norm(self.A @ self.Q - self.Q @ np.diag(self.Lambda), 2))


def build_error_system(gains) -> ErrorSystem:
    """Companion-form error matrix for the given feedback gains.

    Raises :class:`InputError` for non-Hurwitz gains and
    :class:`NumericError` when ``A`` is (numerically) defective.
    """
    gains = np.asarray(gains, dtype=float).reshape(-1)
    n = len(gains)
    if n == 0 or not np.all(np.isfinite(gains)):
        raise InputError("gains must be a non-empty finite vector")
    A = np.zeros((n, n))
    A[:-1, 1:] = np.eye(n - 1)
    A[-1, :] = -gains
    b = np.zeros(n)
    b[-1] = 1.0
    lam, Q = np.linalg.eig(A)
    if np.any(lam.real >= 0):
        raise InputError(f"gains {gains.tolist()} are not Hurwitz: eigenvalues {lam.tolist()}")
    cond = float(np.linalg.cond(Q, 2))
    if not math.isfinite(cond) or cond > 1e10:
        raise NumericError(
            f"companion matrix for gains {gains.tolist()} is (nearly) defective; perturb the gains "
            "so that the closed-loop poles are distinct"
        )
    order = np.argsort(-lam.real, kind="stable")
    lam, Q = lam[order], Q[:, order]
    if np.all(np.abs(lam.imag) == 0):
        lam, Q = lam.real, Q.real
    sys = ErrorSystem(gains, A, b, Q, lam, float(np.max(lam.real)), cond)
    if sys.residual() > 1e-8 * max(np.linalg.norm(A, 2), 1.0):
        raise NumericError("eigendecomposition residual too large")
    return sys


def tracking_bound(sys: ErrorSystem, e0_norm: float, omega_bar: float, t, t0: float = 0.0):
    """``condQ (exp(L dt) |e0| + (1 - exp(L dt)) omega_bar / |L|)`` with ``L`` the slowest pole."""
    dt = np.asarray(t, dtype=float) - t0
    decay = np.exp(sys.lambda_bar * dt)
    out = sys.condQ * (decay * e0_norm + (1.0 - decay) * omega_bar / abs(sys.lambda_bar))
    return float(out) if np.ndim(out) == 0 else out


def ultimate_bound(sys: ErrorSystem, omega_bar: float) -> float:
    return sys.condQ * omega_bar / abs(sys.lambda_bar)


@dataclass
class SinusoidReference:
    """``r(t) = amplitude * sin(2 pi t / period)`` and its derivatives."""

    amplitude: float = 0.5
    period: float = 4.0

    def derivatives(self, t: float, order: int) -> np.ndarray:
        w = 2 * math.pi / self.period
        out = np.empty(order + 1)
        for j in range(order + 1):
            # d^j/dt^j sin(wt) = w^j sin(wt + j pi/2)
            out[j] = self.amplitude * w**j * math.sin(w * t + j * math.pi / 2)
        return out


@dataclass
class Plant:
    f: object
    n: int

    def dynamics(self, x, u):
        dx = np.empty_like(x)
        dx[:-1] = x[1:]
        dx[-1] = self.f(x) + u
        return dx


@dataclass
class FeedbackLinearizingController:
    gains: np.ndarray

    def __post_init__(self):
        self.gains = np.asarray(self.gains, dtype=float).reshape(-1)

    def __call__(self, x, ref_derivs, f_hat):
        e = x - ref_derivs[:-1]
        return -f_hat + ref_derivs[-1] - float(self.gains @ e)


class PerfectFeed:
    """``f_hat = f`` evaluated continuously."""

    def __init__(self, f, offset: float = 0.0):
        self.f = f
        self.offset = offset
        self.omega = 0.0

    def refresh(self, t, x):
        pass

    def value(self, t, x):
        return self.f(x) + self.offset


class HeldFeed:
    """Zero-order hold of ``(f_hat, omega)`` between refreshes."""

    def __init__(self, predictor):
        self.predictor = predictor
        self.f_hat = 0.0
        self.omega = None

    def refresh(self, t, x):
        self.f_hat, self.omega = self.predictor(t, x)

    def value(self, t, x):
        return self.f_hat


class NetworkFeed(HeldFeed):
    """Drives a :class:`~asyncgp.simnet.NetworkSimulator` whose queries are the plant state."""

    def __init__(self, make_simulator, f, kind="asyncdgp"):
        from .aggregation import AggregatorKind

        self.kind = AggregatorKind.parse(kind)
        self.f = f
        self._x = None
        self.last = None
        self.sim = make_simulator(self._query, self._on_aggregate)
        super().__init__(self._predict)

    def _query(self, t):
        return self._x, self.f(self._x)

    def _on_aggregate(self, tick):
        self.last = tick

    def _predict(self, t, x):
        self._x = np.array(x, dtype=float)
        self.sim.run_until(t)
        res = self.last.results.get(self.kind) if self.last is not None else None
        if res is None:
            return self.sim.cfg.prior_mean, self.sim.cfg.prior_bound
        return res.fused_mean, res.omega


@dataclass
class TrackingRun:
    t: np.ndarray
    x: np.ndarray
    xd: np.ndarray
    e: np.ndarray
    f_true: np.ndarray
    f_hat: np.ndarray
    omega: np.ndarray
    tick_mask: np.ndarray
    omega_bar: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def e_norm(self) -> np.ndarray:
        return np.linalg.norm(self.e, axis=1)

    @property
    def pred_error(self) -> np.ndarray:
        return np.abs(self.f_true - self.f_hat)

    def premise_held(self) -> bool:
        """Whether ``|f - f_hat| <= omega_bar`` at every logged step."""
        return bool(np.all(self.pred_error <= self.omega_bar))

    def bound(self, sys: ErrorSystem) -> np.ndarray:
        return tracking_bound(sys, float(self.e_norm[0]), self.omega_bar, self.t, float(self.t[0]))

    def restarted(self, t_start: float):
        """``(index, omega_bar, bound)`` of the bound restarted at the first step with ``t >= t_start``."""
        k0 = int(np.searchsorted(self.t, t_start - 1e-12))
        om = self.omega[k0:]
        omega_bar = float(np.nanmax(om)) if np.any(np.isfinite(om)) else 0.0
        return k0, omega_bar


def simulate_tracking(
    plant: Plant,
    controller: FeedbackLinearizingController,
    feed,
    duration: float,
    step: float,
    reference,
    x0,
    broadcast_interval: float = 0.02,
    t0: float = 0.0,
) -> TrackingRun:
    """Fixed-step RK4 closed-loop simulation.

    ``feed.refresh(t, x)`` is called every ``broadcast_interval`` and
    ``feed.value(t, x)`` at every RK4 stage.
    """
    if not (0 < step <= 0.02):
        raise InputError("step must be in (0, 0.02] seconds")
    ratio = broadcast_interval / step
    per_tick = int(round(ratio))
    if per_tick < 1 or abs(ratio - per_tick) > 1e-9 * ratio:
        raise InputError("broadcast_interval must be an integer multiple of step")
    n_steps = int(round(duration / step))
    n = plant.n
    x = np.array(x0, dtype=float).reshape(-1)
    if x.shape != (n,):
        raise InputError(f"x0 must have {n} entries")

    ts = t0 + step * np.arange(n_steps + 1)
    X = np.empty((n_steps + 1, n))
    XD = np.empty((n_steps + 1, n))
    F = np.empty(n_steps + 1)
    FH = np.empty(n_steps + 1)
    OM = np.full(n_steps + 1, np.nan)
    ticks = np.zeros(n_steps + 1, dtype=bool)

    def rhs(t, state):
        ref = reference.derivatives(t, n)
        u = controller(state, ref, feed.value(t, state))
        return plant.dynamics(state, u)

    for k in range(n_steps + 1):
        t = ts[k]
        if k % per_tick == 0:
            feed.refresh(t, x)
            ticks[k] = True
        X[k] = x
        XD[k] = reference.derivatives(t, n)[:-1]
        F[k] = plant.f(x)
        FH[k] = feed.value(t, x)
        OM[k] = np.nan if feed.omega is None else feed.omega
        if k == n_steps:
            break
        k1 = rhs(t, x)
        k2 = rhs(t + step / 2, x + step / 2 * k1)
        k3 = rhs(t + step / 2, x + step / 2 * k2)
        k4 = rhs(t + step, x + step * k3)
        x = x + step / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"state diverged at t={t + step:.6f}s", time=t + step)

    omega_bar = float(np.nanmax(OM)) if np.any(np.isfinite(OM)) else 0.0
    return TrackingRun(ts, X, XD, X - XD, F, FH, OM, ticks, omega_bar)


def write_tracking_csv(path, run: TrackingRun, sys: ErrorSystem):
    bound = run.bound(sys)
    n = run.e.shape[1]
    header = ["t"] + [f"e{j + 1}" for j in range(n)] + ["abs_pred_error", "omega", "bound"]
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for k in range(len(run.t)):
            row = [run.t[k], *run.e[k], run.pred_error[k], run.omega[k], bound[k]]
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
