"""Drift and initial-condition families with exact derivatives, plus the
hypothesis checks and closed-form constants used by every bound downstream.

All builtin coefficients are autonomous (no explicit time dependence) and
carry closed-form spatial derivatives: orders 0..3 for the drift, 0..2 for
the initial condition.  Sup norms and positivity/concavity conditions are
evaluated on a bounded spatial window; globally the concavity condition
b'' <= -C < 0 is incompatible with a bounded b', so the window is where the
hypotheses are actually checkable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
import math

import numpy as np
from numpy.polynomial import polynomial as npoly

from .errors import UnsupportedOrderError

_LOG2 = math.log(2.0)


class DriftKind(str, Enum):
    ZERO = "zero"
    LINEAR = "linear"
    QUADRATIC = "quadratic"
    LOGCOSH = "logcosh"
    POLYNOMIAL = "polynomial"


class InitialConditionKind(str, Enum):
    ARCTAN_SHIFT = "arctan_shift"
    EXPONENTIAL = "exponential"
    AFFINE = "affine"


@dataclass(frozen=True)
class DriftSpec:
    """A drift field b(t, x) with exact spatial derivatives up to order 3.

    Builtins:
      zero:        b = 0
      linear:      b(x) = -a*x + c
      quadratic:   b(x) = -kappa * x^2 / 2
      logcosh:     b(x) = -kappa * log(cosh(x))
      polynomial:  b(x) = sum_i coefficients[i] * x^i
    """

    kind: DriftKind
    a: float = 0.0
    c: float = 0.0
    kappa: float = 0.0
    coefficients: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind is DriftKind.POLYNOMIAL:
            if not self.coefficients:
                raise ValueError("polynomial drift needs at least one coefficient")
            object.__setattr__(self, "coefficients", tuple(float(v) for v in self.coefficients))
        for name in ("a", "c", "kappa"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"drift parameter {name!r} must be finite")

    @classmethod
    def zero(cls) -> "DriftSpec":
        return cls(DriftKind.ZERO)

    @classmethod
    def linear(cls, a: float, c: float = 0.0) -> "DriftSpec":
        return cls(DriftKind.LINEAR, a=a, c=c)

    @classmethod
    def quadratic(cls, kappa: float) -> "DriftSpec":
        return cls(DriftKind.QUADRATIC, kappa=kappa)

    @classmethod
    def logcosh(cls, kappa: float) -> "DriftSpec":
        return cls(DriftKind.LOGCOSH, kappa=kappa)

    @classmethod
    def polynomial(cls, coefficients) -> "DriftSpec":
        return cls(DriftKind.POLYNOMIAL, coefficients=tuple(coefficients))

    def to_dict(self) -> dict:
        out = {"kind": self.kind.value}
        if self.kind is DriftKind.LINEAR:
            out.update(a=self.a, c=self.c)
        elif self.kind in (DriftKind.QUADRATIC, DriftKind.LOGCOSH):
            out.update(kappa=self.kappa)
        elif self.kind is DriftKind.POLYNOMIAL:
            out.update(coefficients=list(self.coefficients))
        return out


@dataclass(frozen=True)
class InitialConditionSpec:
    """Initial condition u0(x) with exact derivatives up to order 2.

    Builtins:
      arctan_shift: u0(x) = pi/2 + arctan(x) + delta       (delta > 0)
      exponential:  u0(x) = exp(x)
      affine:       u0(x) = offset + slope * x
    """

    kind: InitialConditionKind
    delta: float = 0.0
    offset: float = 0.0
    slope: float = 0.0

    def __post_init__(self):
        if self.kind is InitialConditionKind.ARCTAN_SHIFT and not self.delta > 0:
            raise ValueError("arctan_shift requires delta > 0")

    @classmethod
    def arctan_shift(cls, delta: float) -> "InitialConditionSpec":
        return cls(InitialConditionKind.ARCTAN_SHIFT, delta=delta)

    @classmethod
    def exponential(cls) -> "InitialConditionSpec":
        return cls(InitialConditionKind.EXPONENTIAL)

    @classmethod
    def affine(cls, offset: float, slope: float) -> "InitialConditionSpec":
        return cls(InitialConditionKind.AFFINE, offset=offset, slope=slope)

    def to_dict(self) -> dict:
        out = {"kind": self.kind.value}
        if self.kind is InitialConditionKind.ARCTAN_SHIFT:
            out.update(delta=self.delta)
        elif self.kind is InitialConditionKind.AFFINE:
            out.update(offset=self.offset, slope=self.slope)
        return out


@dataclass(frozen=True)
class Window:
    """Spatial interval on which sup norms and hypotheses are evaluated."""

    x_lo: float
    x_hi: float
    n_scan: int = 401

    def __post_init__(self):
        if not self.x_lo < self.x_hi:
            raise ValueError("window requires x_lo < x_hi")
        if self.n_scan < 2:
            raise ValueError("window requires n_scan >= 2")

    @cached_property
    def grid(self) -> np.ndarray:
        g = np.linspace(self.x_lo, self.x_hi, self.n_scan)
        g.setflags(write=False)
        return g

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x)
        return (x >= self.x_lo) & (x <= self.x_hi)

    def to_dict(self) -> dict:
        return {"x_lo": self.x_lo, "x_hi": self.x_hi, "n_scan": self.n_scan}


def _neg_logcosh(x: np.ndarray) -> np.ndarray:
    # log(cosh(x)) = |x| + log1p(exp(-2|x|)) - log(2), overflow-safe
    ax = np.abs(x)
    return -(ax + np.log1p(np.exp(-2.0 * ax)) - _LOG2)


def eval_drift(spec: DriftSpec, t, x, order: int):
    """Exact order-th spatial derivative of the drift at (t, x).

    Accepts scalars or arrays for t and x (broadcast together); builtins are
    autonomous so t only participates in broadcasting.  Orders above 3 raise
    UnsupportedOrderError.
    """
    if not isinstance(order, (int, np.integer)) or order < 0 or order > 3:
        raise UnsupportedOrderError(f"drift derivatives supported for orders 0..3, got {order!r}")
    x_arr = np.asarray(x, dtype=float)
    scalar = np.isscalar(x) and np.isscalar(t)
    k = spec.kind
    if k is DriftKind.ZERO:
        out = np.zeros_like(x_arr)
    elif k is DriftKind.LINEAR:
        if order == 0:
            out = -spec.a * x_arr + spec.c
        elif order == 1:
            out = np.full_like(x_arr, -spec.a)
        else:
            out = np.zeros_like(x_arr)
    elif k is DriftKind.QUADRATIC:
        if order == 0:
            out = -0.5 * spec.kappa * x_arr * x_arr
        elif order == 1:
            out = -spec.kappa * x_arr
        elif order == 2:
            out = np.full_like(x_arr, -spec.kappa)
        else:
            out = np.zeros_like(x_arr)
    elif k is DriftKind.LOGCOSH:
        if order == 0:
            out = spec.kappa * _neg_logcosh(x_arr)
        else:
            th = np.tanh(x_arr)
            sech2 = 1.0 - th * th
            if order == 1:
                out = -spec.kappa * th
            elif order == 2:
                out = -spec.kappa * sech2
            else:
                out = 2.0 * spec.kappa * sech2 * th
    else:  # polynomial
        coeffs = np.asarray(spec.coefficients, dtype=float)
        if order > 0:
            coeffs = npoly.polyder(coeffs, m=order)
        out = npoly.polyval(x_arr, coeffs) if coeffs.size else np.zeros_like(x_arr)
        out = np.broadcast_to(np.asarray(out, dtype=float), x_arr.shape).copy()
    if scalar:
        return float(out)
    return out


def eval_initial(spec: InitialConditionSpec, x, order: int):
    """Exact order-th derivative of the initial condition at x (orders 0..2)."""
    if not isinstance(order, (int, np.integer)) or order < 0 or order > 2:
        raise UnsupportedOrderError(
            f"initial-condition derivatives supported for orders 0..2, got {order!r}"
        )
    x_arr = np.asarray(x, dtype=float)
    scalar = np.isscalar(x)
    k = spec.kind
    if k is InitialConditionKind.ARCTAN_SHIFT:
        if order == 0:
            out = 0.5 * np.pi + np.arctan(x_arr) + spec.delta
        elif order == 1:
            out = 1.0 / (1.0 + x_arr * x_arr)
        else:
            d = 1.0 + x_arr * x_arr
            out = -2.0 * x_arr / (d * d)
    elif k is InitialConditionKind.EXPONENTIAL:
        out = np.exp(x_arr)
    else:  # affine
        if order == 0:
            out = spec.offset + spec.slope * x_arr
        elif order == 1:
            out = np.full_like(x_arr, spec.slope)
        else:
            out = np.zeros_like(x_arr)
    if scalar:
        return float(out)
    return out


@dataclass(frozen=True)
class HypothesisReport:
    """Window-scan verdicts for the structural hypotheses plus sup norms.

    cc1:  b'' <= 0 on the window.
    cc11: b'' <= -C < 0 on the window; c_cc11 is the largest valid C
          (the grid minimum of -b'').
    cc2:  u0 > 0 and u0' > 0 on the window.
    cc22: u0 >= C > 0 and u0' > 0 on the window; c_cc22 is the grid
          minimum of u0.

    Sup norms are grid maxima of |.| over the window.  The scan certifies
    the hypotheses on the window only; smoothness of the builtin
    coefficients (including Hoelder continuity of the top derivative) holds
    by construction and is not tested numerically.
    """

    cc1: bool
    cc11: bool
    cc2: bool
    cc22: bool
    c_cc11: float | None
    c_cc22: float | None
    b1_sup: float
    b2_sup: float
    b3_sup: float
    u0_sup: float
    u0p_sup: float
    u0pp_sup: float
    window: Window
    horizon: float
    violations: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "cc1": self.cc1,
            "cc11": self.cc11,
            "cc2": self.cc2,
            "cc22": self.cc22,
            "c_cc11": self.c_cc11,
            "c_cc22": self.c_cc22,
            "sup_norms": {
                "b1": self.b1_sup,
                "b2": self.b2_sup,
                "b3": self.b3_sup,
                "u0": self.u0_sup,
                "u0p": self.u0p_sup,
                "u0pp": self.u0pp_sup,
            },
            "window": self.window.to_dict(),
            "horizon": self.horizon,
            "violations": dict(self.violations),
        }


def _refined_max(values: np.ndarray) -> float:
    """Grid maximum, sharpened by the parabola through the three nodes
    around an interior argmax.  The grid alone can undershoot a smooth
    interior extremum by O(spacing^2); the vertex estimate removes that,
    so sup norms certify the continuum value to within O(spacing^4)."""
    j = int(np.argmax(values))
    top = float(values[j])
    if 0 < j < len(values) - 1:
        lo, hi = float(values[j - 1]), float(values[j + 1])
        denom = lo - 2.0 * top + hi
        if denom < 0.0:
            top = top - (lo - hi) ** 2 / (8.0 * denom)
    return top


def _refined_min(values: np.ndarray) -> float:
    return -_refined_max(-np.asarray(values))


def check_hypotheses(
    drift: DriftSpec,
    ic: InitialConditionSpec,
    window: Window,
    horizon: float,
) -> HypothesisReport:
    """Scan the window grid with exact derivatives and report hypothesis flags.

    Largest valid constants: c_cc11 is the window minimum of -b'' (None when
    nonpositive), c_cc22 the window minimum of u0 (None when nonpositive).
    Interior extrema are parabolically refined, which keeps sup norms from
    undershooting (and the positivity constants from overshooting) the
    continuum values by the grid resolution.  Violation locations record
    one offending grid point per failed flag.
    """
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    xs = window.grid
    b2 = np.asarray(eval_drift(drift, 0.0, xs, 2))
    u0 = np.asarray(eval_initial(ic, xs, 0))
    u0p = np.asarray(eval_initial(ic, xs, 1))

    violations: dict[str, float] = {}
    cc1 = bool(np.all(b2 <= 0.0))
    if not cc1:
        violations["cc1"] = float(xs[int(np.argmax(b2))])
    c_cc11 = -_refined_max(b2)
    cc11 = c_cc11 > 0.0
    if not cc11:
        violations["cc11"] = float(xs[int(np.argmax(b2))])
        c_cc11 = None

    pos_u0 = np.all(u0 > 0.0)
    pos_u0p = np.all(u0p > 0.0)
    cc2 = bool(pos_u0 and pos_u0p)
    if not cc2:
        bad = np.argmin(u0) if not pos_u0 else np.argmin(u0p)
        violations["cc2"] = float(xs[int(bad)])
    c_cc22 = _refined_min(u0)
    cc22 = bool(c_cc22 > 0.0 and pos_u0p)
    if not cc22:
        violations["cc22"] = violations.get("cc2", float(xs[int(np.argmin(u0))]))
        c_cc22 = None

    return HypothesisReport(
        cc1=cc1,
        cc11=cc11,
        cc2=cc2,
        cc22=cc22,
        c_cc11=c_cc11,
        c_cc22=c_cc22,
        b1_sup=_refined_max(np.abs(eval_drift(drift, 0.0, xs, 1))),
        b2_sup=_refined_max(np.abs(b2)),
        b3_sup=_refined_max(np.abs(eval_drift(drift, 0.0, xs, 3))),
        u0_sup=_refined_max(np.abs(u0)),
        u0p_sup=_refined_max(np.abs(u0p)),
        u0pp_sup=_refined_max(np.abs(eval_initial(ic, xs, 2))),
        window=window,
        horizon=float(horizon),
        violations=violations,
    )


@dataclass(frozen=True)
class BoundConstants:
    """Closed-form constants controlling the derivative and density bounds.

      c1 = exp(T * ||b'||)                    bounds |DY|, |JY| and |D2Y| via c2
      c2 = c1^2 * T * ||b''||                 bounds |DJY| and |D2Y|
      c3 = ||u0'|| c1^2 + ||u0|| c2           bounds |Du|
      d2jy_bound = T c1^3 (||b'''|| + 2 T ||b''||^2)   bounds |D2JY|
      c4 = 3 ||u0'|| c1 c2 + ||u0''|| c1^3 + ||u0|| * d2jy_bound   bounds |D2u|
      c5 = C^4 exp(-4T ||b'||) t^3 / 3        lower bound for ||Du||_H^2,
                                              with C the cc11 constant;
                                              None when cc11 fails.

    All sup norms are the window sups from the hypothesis report, so the
    bounds apply to trajectories that stay inside the window.
    """

    c1: float
    c2: float
    c3: float
    c4: float
    c5: float | None
    d2jy_bound: float
    horizon: float
    t: float
    hypotheses: HypothesisReport

    def to_dict(self) -> dict:
        return {
            "c1": self.c1,
            "c2": self.c2,
            "c3": self.c3,
            "c4": self.c4,
            "c5": self.c5,
            "d2jy_bound": self.d2jy_bound,
            "horizon": self.horizon,
            "t": self.t,
        }


def constants(report: HypothesisReport, horizon: float, t: float) -> BoundConstants:
    """Evaluate the closed-form constants for evaluation time t in (0, horizon]."""
    if not 0.0 < t <= horizon:
        raise ValueError("need 0 < t <= horizon")
    T = float(horizon)
    c1 = math.exp(T * report.b1_sup)
    c2 = c1 * c1 * T * report.b2_sup
    c3 = report.u0p_sup * c1 * c1 + report.u0_sup * c2
    d2jy = T * c1**3 * (report.b3_sup + 2.0 * T * report.b2_sup**2)
    c4 = 3.0 * report.u0p_sup * c1 * c2 + report.u0pp_sup * c1**3 + report.u0_sup * d2jy
    c5 = None
    if report.cc11:
        c5 = report.c_cc11**4 * math.exp(-4.0 * T * report.b1_sup) * t**3 / 3.0
    return BoundConstants(
        c1=c1,
        c2=c2,
        c3=c3,
        c4=c4,
        c5=c5,
        d2jy_bound=d2jy,
        horizon=T,
        t=float(t),
        hypotheses=report,
    )
