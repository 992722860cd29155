"""Kernels, their distance functions and Lipschitz constants.

Every kernel here is a function of a scalar distance ``d(x, x')``:

* linear:   ``sigma_l^2 (x-c)^T (x'-c) + sigma_b^2`` with ``d = (x-c)^T (x'-c)``
* se:       ``sigma_f^2 exp(-d^2 / (2 sigma_l^2))`` with ``d = ||x - x'||``
* ardse:    ``sigma_f^2 exp(-d^2 / 2)`` with ``d = ||Sigma_L^{-1} (x - x')||``
* rq:       ``sigma_f^2 (1 + d^2 / (2 alpha sigma_l^2))^(-alpha)``, ``d = ||x - x'||``
* periodic: ``sigma_f^2 exp(-2 sin^2(pi d / p) / sigma_l^2)``, ``d = ||x - x'||``

The Lipschitz constant ``L`` of a kernel bounds
``|k(., x) - k(., x')| <= L d(x, x')``.  ``lipschitz_closed_form`` returns the
tabulated analytic constant, ``lipschitz_oracle`` recovers the same number by
brute-force maximisation of ``|dk/dd|`` so the two can be checked against each
other.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from .errors import InputError, NumericError

__all__ = [
    "KernelFamily",
    "KernelSpec",
    "LipschitzReport",
    "eval_kernel",
    "kernel_matrix",
    "kernel_diag",
    "distance",
    "lipschitz_closed_form",
    "rq_lipschitz_corrected",
    "lipschitz_constant",
    "lipschitz_oracle",
    "f_lipschitz",
    "golden_section_max",
]

INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


class KernelFamily(str, Enum):
    LINEAR = "linear"
    SE = "se"
    ARDSE = "ardse"
    RQ = "rq"
    PERIODIC = "periodic"

    @classmethod
    def parse(cls, name) -> "KernelFamily":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("-", "").replace("_", "")
        aliases = {"lin": "linear", "sqexp": "se", "rbf": "se", "ard": "ardse", "per": "periodic"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise InputError(f"unknown kernel family {name!r}") from None


def _positive(name, value):
    if not (math.isfinite(value) and value > 0):
        raise InputError(f"{name} must be a positive finite number, got {value!r}")


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family plus hyperparameters.

    ``center`` defaults to the origin and ``lengthscales`` (ARD-SE diagonal of
    Sigma_L) defaults to ``sigma_l`` in every dimension.
    """

    family: KernelFamily
    dim: int = 1
    sigma_f: float = 1.0
    sigma_l: float = 1.0
    sigma_b: float = 0.0
    center: tuple = None
    lengthscales: tuple = None
    alpha: float = 1.0
    period: float = 1.0

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "family", KernelFamily.parse(self.family))
        if int(self.dim) != self.dim or self.dim < 1:
            raise InputError(f"dim must be a positive integer, got {self.dim!r}")
        set_(self, "dim", int(self.dim))
        for name in ("sigma_f", "sigma_l", "alpha", "period"):
            set_(self, name, float(getattr(self, name)))
            _positive(name, getattr(self, name))
        set_(self, "sigma_b", float(self.sigma_b))
        if not (math.isfinite(self.sigma_b) and self.sigma_b >= 0):
            raise InputError(f"sigma_b must be nonnegative, got {self.sigma_b!r}")

        center = (0.0,) * self.dim if self.center is None else tuple(float(c) for c in self.center)
        if len(center) != self.dim:
            raise InputError(f"center has length {len(center)}, expected dim={self.dim}")
        set_(self, "center", center)

        if self.lengthscales is None:
            scales = (self.sigma_l,) * self.dim
        else:
            scales = tuple(float(s) for s in np.atleast_1d(self.lengthscales))
        if len(scales) != self.dim:
            raise InputError(f"lengthscales has length {len(scales)}, expected dim={self.dim}")
        for s in scales:
            _positive("lengthscales entry", s)
        set_(self, "lengthscales", scales)

    @classmethod
    def from_params(cls, family, **params) -> "KernelSpec":
        """Build a spec from loosely typed keyword values (CLI / JSON input)."""
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(params) - known
        if unknown:
            raise InputError(f"unknown kernel parameters: {sorted(unknown)}")
        if "dim" not in params:
            for vec in ("center", "lengthscales"):
                if params.get(vec) is not None:
                    params["dim"] = len(np.atleast_1d(params[vec]))
        return cls(family=family, **params)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["family"] = self.family.value
        d["center"] = list(self.center)
        d["lengthscales"] = list(self.lengthscales)
        return d

    @property
    def prior_variance(self) -> float:
        return self.sigma_f**2

    def _check(self, arr, what):
        arr = np.asarray(arr, dtype=float)
        if arr.shape[-1:] != (self.dim,):
            raise InputError(f"{what} has trailing dimension {arr.shape[-1:]}, expected ({self.dim},)")
        return arr


def _distance_array(spec: KernelSpec, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Kernel distance between broadcastable point arrays of shape (..., dim)."""
    if spec.family is KernelFamily.LINEAR:
        c = np.asarray(spec.center)
        return np.sum((a - c) * (b - c), axis=-1)
    diff = a - b
    if spec.family is KernelFamily.ARDSE:
        diff = diff / np.asarray(spec.lengthscales)
    return np.sqrt(np.sum(diff * diff, axis=-1))


def _profile(spec: KernelSpec, d):
    """Kernel value as a function of its scalar distance."""
    fam = spec.family
    sf2 = spec.sigma_f**2
    if fam is KernelFamily.LINEAR:
        return spec.sigma_l**2 * d + spec.sigma_b**2
    if fam is KernelFamily.SE:
        return sf2 * np.exp(-0.5 * (d / spec.sigma_l) ** 2)
    if fam is KernelFamily.ARDSE:
        return sf2 * np.exp(-0.5 * d * d)
    if fam is KernelFamily.RQ:
        return sf2 * np.exp(-spec.alpha * np.log1p(d * d / (2.0 * spec.alpha * spec.sigma_l**2)))
    s = np.sin(np.pi * d / spec.period)
    return sf2 * np.exp(-2.0 * s * s / spec.sigma_l**2)


def kernel_diag(spec: KernelSpec, X, X2) -> np.ndarray:
    """Row-wise kernel values ``k(X[i], X2[i])``."""
    X = spec._check(X, "X")
    X2 = spec._check(X2, "X2")
    return _profile(spec, _distance_array(spec, X, X2))


def kernel_matrix(spec: KernelSpec, X, X2=None) -> np.ndarray:
    """Gram matrix between the rows of ``X`` (n, dim) and ``X2`` (m, dim)."""
    X = np.atleast_2d(spec._check(X, "X"))
    X2 = X if X2 is None else np.atleast_2d(spec._check(X2, "X2"))
    return _profile(spec, _distance_array(spec, X[:, None, :], X2[None, :, :]))


def eval_kernel(spec: KernelSpec, x, x2) -> float:
    x = spec._check(x, "x")
    x2 = spec._check(x2, "x2")
    if x.ndim != 1 or x2.ndim != 1:
        raise InputError("eval_kernel expects two vectors")
    return float(_profile(spec, _distance_array(spec, x, x2)))


def distance(spec: KernelSpec, x, x2) -> float:
    """Kernel-specific distance; sign-indefinite for the linear kernel."""
    x = spec._check(x, "x")
    x2 = spec._check(x2, "x2")
    return float(_distance_array(spec, x, x2))


def lipschitz_closed_form(spec: KernelSpec) -> float:
    """Tabulated Lipschitz constant of the kernel w.r.t. its distance.

    The RQ entry is returned exactly as tabulated; it under-estimates the true
    maximum slope (see :func:`rq_lipschitz_corrected`) and is undefined when
    ``2 alpha^2 + 2 alpha - 1 <= 0``.
    """
    fam = spec.family
    sf2, sl = spec.sigma_f**2, spec.sigma_l
    if fam is KernelFamily.LINEAR:
        return sl**2
    if fam is KernelFamily.SE:
        return sf2 / sl * math.exp(-0.5)
    if fam is KernelFamily.ARDSE:
        return sf2 * math.exp(-0.5)
    if fam is KernelFamily.RQ:
        a = spec.alpha
        q = 2 * a * a + 2 * a - 1
        if q <= 0:
            raise NumericError(f"tabulated RQ constant undefined for alpha={a} (2a^2+2a-1 <= 0)")
        return sf2 / sl**2 * ((2 * a * a + 2 * a) / q) ** (-a - 1) * math.sqrt(2 * a * sl**2 / q)
    p = spec.period
    if sl**2 >= 4:
        return 4 * math.pi * sf2 / (p * sl**2) * math.exp(-2.0 / sl**2)
    return 2 * math.pi * sf2 / (p * sl) * math.exp(-0.5)


def rq_lipschitz_corrected(spec: KernelSpec) -> float:
    # critical distance d*^2 = 2 alpha sigma_l^2 / (2 alpha + 1)
    a = spec.alpha
    return (
        spec.sigma_f**2
        / spec.sigma_l
        * math.sqrt(2 * a / (2 * a + 1))
        * ((2 * a + 2) / (2 * a + 1)) ** (-a - 1)
    )


def lipschitz_constant(spec: KernelSpec) -> float:
    """Lipschitz constant used for error bounds: always a valid upper bound.

    For RQ this is ``max(tabulated, corrected)``; all other families use the
    tabulated value.
    """
    if spec.family is KernelFamily.RQ:
        corrected = rq_lipschitz_corrected(spec)
        try:
            return max(lipschitz_closed_form(spec), corrected)
        except NumericError:
            return corrected
    return lipschitz_closed_form(spec)


def f_lipschitz(gamma: float, L_kappa: float) -> float:
    """Constant ``L_f`` with ``|f(x) - f(x')| <= L_f sqrt(d(x, x'))`` for ``||f|| <= gamma``."""
    for name, v in (("gamma", gamma), ("L_kappa", L_kappa)):
        if not (math.isfinite(v) and v > 0):
            raise InputError(f"{name} must be positive, got {v!r}")
    return gamma * math.sqrt(2.0 * L_kappa)


def golden_section_max(f, lo, hi, tol=1e-10, max_iter=200):
    """Maximise a unimodal scalar function on ``[lo, hi]``; returns (x, f(x))."""
    a, b = float(lo), float(hi)
    c = b - INV_PHI * (b - a)
    d = a + INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + INV_PHI * (b - a)
            fd = f(d)
    x = 0.5 * (a + b)
    fx = f(x)
    # endpoints and interior probes may beat the midpoint on flat objectives
    best = max((fx, x), (fc, c), (fd, d))
    return best[1], best[0]


@dataclass
class LipschitzReport:
    family: str
    closed_form: float
    oracle_value: float
    critical_distance: float
    agrees: bool
    tol: float = 1e-6
    corrected_closed_form: float = None
    corrected_agrees: bool = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {
            "family": self.family,
            "closed_form": self.closed_form,
            "oracle": self.oracle_value,
            "critical_distance": self.critical_distance,
            "agrees": self.agrees,
        }
        if self.corrected_closed_form is not None:
            out["corrected_closed_form"] = self.corrected_closed_form
            out["corrected_agrees"] = self.corrected_agrees
        return out


def default_d_max(spec: KernelSpec) -> float:
    if spec.family is KernelFamily.SE or spec.family is KernelFamily.RQ:
        return 10.0 * spec.sigma_l
    if spec.family is KernelFamily.PERIODIC:
        # |dk/dd| is p-periodic
        return spec.period
    return 10.0


def _slope_function(spec: KernelSpec):
    """|dk/dd| by central differences of the kernel evaluated on real points.

    Points are placed so that their kernel distance equals ``d``; the kernel is
    evaluated through :func:`kernel_diag`, independent of any derivative
    formula.
    """
    e1 = np.zeros(spec.dim)
    e1[0] = 1.0
    if spec.family is KernelFamily.LINEAR:
        c = np.asarray(spec.center)
        anchor, direction, scale = c + e1, e1, 1.0
    elif spec.family is KernelFamily.ARDSE:
        anchor, direction, scale = np.zeros(spec.dim), e1 * spec.lengthscales[0], 1.0
    else:
        anchor, direction = np.zeros(spec.dim), e1
        scale = spec.period if spec.family is KernelFamily.PERIODIC else spec.sigma_l
    h = 1e-5 * scale

    def k_at(d):
        d = np.atleast_1d(np.asarray(d, dtype=float))
        if spec.family is KernelFamily.LINEAR:
            pts = anchor + d[:, None] * direction
        else:
            pts = d[:, None] * direction
        return kernel_diag(spec, np.broadcast_to(anchor, pts.shape), pts)

    def slope(d):
        d = np.atleast_1d(np.asarray(d, dtype=float))
        return np.abs(k_at(d + h) - k_at(d - h)) / (2.0 * h)

    return slope


def lipschitz_oracle(spec: KernelSpec, d_max=None, grid_points=2001, tol=1e-6) -> LipschitzReport:
    """Numerically maximise ``|dk/dd|`` and compare with the closed form."""
    if d_max is None:
        d_max = default_d_max(spec)
    if not (d_max > 0):
        raise InputError("d_max must be positive")
    if grid_points < 1000:
        raise InputError("grid_points must be at least 1000")
    slope = _slope_function(spec)
    grid = np.linspace(0.0, float(d_max), int(grid_points))
    values = slope(grid)
    if not np.all(np.isfinite(values)):
        raise NumericError(f"non-finite kernel slope on the grid for {spec.family.value}")
    i = int(np.argmax(values))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    d_star, best = golden_section_max(lambda d: float(slope(d)[0]), lo, hi)
    if values[i] > best:
        d_star, best = float(grid[i]), float(values[i])

    try:
        closed = lipschitz_closed_form(spec)
    except NumericError:
        closed = math.nan
    report = LipschitzReport(
        family=spec.family.value,
        closed_form=closed,
        oracle_value=float(best),
        critical_distance=float(d_star),
        agrees=bool(abs(closed - best) <= tol * closed),
        tol=tol,
    )
    if spec.family is KernelFamily.RQ:
        corrected = rq_lipschitz_corrected(spec)
        report.corrected_closed_form = corrected
        report.corrected_agrees = bool(abs(corrected - best) <= tol * corrected)
    return report
