"""Characteristics of the continuity equation along a fixed noise path.

The forward map X solves  X(r) = x + int_s^r b(v, X(v)) dv + B(r) - B(s)
by explicit Euler; the backward (inverse-flow) map Y solves

    Y(r) = x - int_r^t b(v, Y(v)) dv - (B(t) - B(r)),   Y(t) = x,

stepping from the terminal anchor down to s with the same increments.  The
noise is additive, so the Ito and Stratonovich readings coincide and Euler
is strong order 1.  The spatial derivative of the inverse flow has the
closed form  JY = exp(-int_s^t b'(v, Y(v)) dv), evaluated by trapezoidal
quadrature on the grid, and the solution is u(t, x) = u0(Y(0)) * JY.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .errors import DivergenceError
from .paths import BrownianPath
from .scenario import DriftSpec, InitialConditionSpec, eval_drift, eval_initial

DIVERGENCE_GUARD = 1e8


@dataclass(frozen=True)
class ForwardTrajectory:
    """Euler solution r -> X_{s,r}(x) on grid nodes of [s, t]; values[0] == x."""

    times: np.ndarray
    values: np.ndarray
    s: float
    t: float
    x: float
    path: BrownianPath


@dataclass(frozen=True)
class BackwardTrajectory:
    """Inverse-flow samples r -> Y_{r,t}(x) on grid nodes of [s, t]; values[-1] == x."""

    times: np.ndarray
    values: np.ndarray
    s: float
    t: float
    x: float
    path: BrownianPath

    @property
    def step(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0


def _euler_forward(drift, times, increments, x0):
    """Batched forward Euler. increments: (m, K); returns (values (m, K+1),
    first bad step per row or -1).  Diverged rows freeze at their last state."""
    inc = np.atleast_2d(increments)
    m, K = inc.shape
    vals = np.empty((m, K + 1))
    vals[:, 0] = x0
    bad_step = np.full(m, -1, dtype=np.int64)
    state = np.full(m, float(x0))
    h = times[1] - times[0] if K else 0.0
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(K):
            alive = bad_step < 0
            nxt = state + eval_drift(drift, times[k], state, 0) * h + inc[:, k]
            blown = alive & (~np.isfinite(nxt) | (np.abs(nxt) > DIVERGENCE_GUARD))
            bad_step[blown] = k + 1
            state = np.where(alive & ~blown, nxt, state)
            vals[:, k + 1] = state
    return vals, bad_step


def _euler_backward(drift, times, increments, x_terminal):
    """Batched backward Euler from the terminal anchor; same conventions as
    _euler_forward but filling values right to left."""
    inc = np.atleast_2d(increments)
    m, K = inc.shape
    vals = np.empty((m, K + 1))
    vals[:, K] = x_terminal
    bad_step = np.full(m, -1, dtype=np.int64)
    state = np.full(m, float(x_terminal))
    h = times[1] - times[0] if K else 0.0
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(K - 1, -1, -1):
            alive = bad_step < 0
            nxt = state - eval_drift(drift, times[k + 1], state, 0) * h - inc[:, k]
            blown = alive & (~np.isfinite(nxt) | (np.abs(nxt) > DIVERGENCE_GUARD))
            bad_step[blown] = k
            state = np.where(alive & ~blown, nxt, state)
            vals[:, k] = state
    return vals, bad_step


def _segment(path: BrownianPath, s: float, t: float):
    grid = path.grid
    ks, kt = grid.index_of(s), grid.index_of(t)
    if not 0 <= ks <= kt <= grid.n_steps:
        raise ValueError("need 0 <= s <= t <= horizon on the grid")
    return grid.times[ks : kt + 1], path.increments[ks:kt]


def solve_forward(drift: DriftSpec, path: BrownianPath, s: float, t: float, x: float) -> ForwardTrajectory:
    """Integrate the characteristics forward from (s, x) to time t."""
    times, inc = _segment(path, s, t)
    vals, bad = _euler_forward(drift, times, inc[None, :], x)
    if bad[0] >= 0:
        raise DivergenceError(
            f"forward characteristic diverged at step {int(bad[0])} (t={times[int(bad[0])]:g})",
            step=int(bad[0]),
        )
    return ForwardTrajectory(times=times, values=vals[0], s=s, t=t, x=x, path=path)


def solve_backward(drift: DriftSpec, path: BrownianPath, s: float, t: float, x: float) -> BackwardTrajectory:
    """Integrate the inverse flow from the terminal condition Y(t) = x down to s."""
    times, inc = _segment(path, s, t)
    vals, bad = _euler_backward(drift, times, inc[None, :], x)
    if bad[0] >= 0:
        raise DivergenceError(
            f"backward characteristic diverged at step {int(bad[0])} (t={times[int(bad[0])]:g})",
            step=int(bad[0]),
        )
    return BackwardTrajectory(times=times, values=vals[0], s=s, t=t, x=x, path=path)


def jacobian_backward(drift: DriftSpec, traj: BackwardTrajectory) -> float:
    """exp(-trapz of b' along the backward trajectory); strictly positive.

    The quadrature accumulates left to right (cumulative trapezoid), the
    same reduction the derivative pipeline uses, so Jacobians agree bitwise
    across the per-path and batched code paths.
    """
    bp = np.asarray(eval_drift(drift, traj.times, traj.values, 1))
    q = cumulative_trapezoid(bp, dx=traj.step, initial=0.0)[-1]
    jy = float(np.exp(-q))
    assert jy > 0.0
    return jy


@dataclass(frozen=True)
class SolutionValue:
    """Solution sample u(t, x) with its pullback diagnostics."""

    value: float
    y_start: float  # Y_{0,t}(x)
    jacobian: float  # JY_{0,t}(x)


def solution_at(
    drift: DriftSpec, ic: InitialConditionSpec, path: BrownianPath, t: float, x: float
) -> SolutionValue:
    """u(t, x) = u0(Y_{0,t}(x)) * JY_{0,t}(x) along the given path."""
    if not t > 0:
        raise ValueError("t must be positive")
    traj = solve_backward(drift, path, 0.0, t, x)
    jy = jacobian_backward(drift, traj)
    y0 = float(traj.values[0])
    return SolutionValue(value=eval_initial(ic, y0, 0) * jy, y_start=y0, jacobian=jy)


def dump_trajectory_csv(traj, fileobj) -> None:
    """Debug dump with header k,t,X or k,t,Y depending on direction."""
    col = "Y" if isinstance(traj, BackwardTrajectory) else "X"
    fileobj.write(f"k,t,{col}\n")
    for k, (t, v) in enumerate(zip(traj.times, traj.values)):
        fileobj.write(f"{k},{t:.17g},{v:.17g}\n")
