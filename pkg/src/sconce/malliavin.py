"""Pathwise derivative profiles of the inverse flow, its Jacobian and the
solution, Hilbert-space norms by quadrature, and the per-path sign/bound
audit against the closed-form constants.

For a backward trajectory anchored at (t, x) the profiles are grid
functions of the perturbation time alpha, supported on [0, t] and exactly
zero beyond it.  Writing I(a) for the running integral of b' along the
trajectory and E = exp(-I):

    dY(a)   = -E(a)
    dJY(a)  = JY * E(a) * int_0^a b''(v, Y_v) e^{I(v)} dv
    du(a)   = u0'(Y_0) dY(a) JY + u0(Y_0) dJY(a)

Second derivatives reduce to the same cumulatives; see _engine for the
factored forms used.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _engine
from .errors import GridMismatchError
from .flow import BackwardTrajectory
from .paths import BrownianPath, TimeGrid, sample_increments
from .scenario import BoundConstants, DriftSpec, InitialConditionSpec, eval_initial


def h_inner(profile_a: np.ndarray, profile_b: np.ndarray, step: float) -> float:
    """Trapezoidal L2([0, horizon]) inner product of two grid profiles."""
    a = np.asarray(profile_a, dtype=float)
    b = np.asarray(profile_b, dtype=float)
    if a.shape != b.shape:
        raise GridMismatchError(f"profile shapes differ: {a.shape} vs {b.shape}")
    return float(np.trapezoid(a * b, dx=step))


def h_norm(profile: np.ndarray, step: float) -> float:
    """Trapezoidal L2([0, horizon]) norm of a grid profile."""
    return float(np.sqrt(h_inner(profile, profile, step)))


def _require_zero_anchor(traj: BackwardTrajectory):
    if traj.s != 0.0:
        raise ValueError("solution-level derivatives need a trajectory anchored at s=0")


def _full_profile(grid: TimeGrid, traj_values: np.ndarray, k_lo: int) -> np.ndarray:
    out = np.zeros(grid.n_steps + 1)
    out[k_lo : k_lo + len(traj_values)] = traj_values
    return out


def _alpha_index(traj: BackwardTrajectory, alpha: float) -> int | None:
    """Index of alpha within the trajectory subgrid, or None when the
    profile vanishes there (alpha outside [s, t])."""
    grid = traj.path.grid
    k = grid.index_of(alpha)
    k_lo = grid.index_of(traj.s)
    k_hi = grid.index_of(traj.t)
    if k < k_lo or k > k_hi:
        return None
    return k - k_lo


def dY(drift: DriftSpec, traj: BackwardTrajectory, alpha: float) -> float:
    """First derivative of the inverse flow: -1_[s,t](alpha) exp(-int_s^alpha b')."""
    k = _alpha_index(traj, alpha)
    if k is None:
        return 0.0
    e, _, _, _, _ = _engine.second_order_cumulatives(drift, traj.times, traj.values)
    return float(-e[k])


def dJY(drift: DriftSpec, traj: BackwardTrajectory, alpha: float) -> float:
    """First derivative of the Jacobian of the inverse flow; <= 0 whenever
    b'' <= 0 along the trajectory."""
    k = _alpha_index(traj, alpha)
    if k is None:
        return 0.0
    e, g, _, _, jy = _engine.second_order_cumulatives(drift, traj.times, traj.values)
    return float(jy * e[k] * g[k])


def d2Y(drift: DriftSpec, traj: BackwardTrajectory, alpha: float, beta: float) -> float:
    """Second derivative of the inverse flow (symmetric in alpha, beta)."""
    ka = _alpha_index(traj, alpha)
    kb = _alpha_index(traj, beta)
    if ka is None or kb is None:
        return 0.0
    e, g, _, _, _ = _engine.second_order_cumulatives(drift, traj.times, traj.values)
    return float(-(e[ka] * e[kb]) * g[min(ka, kb)])


def d2JY(drift: DriftSpec, traj: BackwardTrajectory, alpha: float, beta: float) -> float:
    """Second derivative of the Jacobian (symmetric in alpha, beta)."""
    ka = _alpha_index(traj, alpha)
    kb = _alpha_index(traj, beta)
    if ka is None or kb is None:
        return 0.0
    e, g, h3, w, jy = _engine.second_order_cumulatives(drift, traj.times, traj.values)
    m = min(ka, kb)
    # grouping e[ka] * e[kb] keeps the value bitwise symmetric in (alpha, beta)
    return float(jy * (e[ka] * e[kb]) * (g[ka] * g[kb] + g[m] ** 2 - w[m] - h3[m]))


@dataclass(frozen=True)
class DerivativeProfile:
    """Grid profiles alpha -> dY, dJY, du for one trajectory anchored at (t, x).

    Arrays live on the full [0, horizon] grid and are exactly zero for
    alpha > t.
    """

    alphas: np.ndarray
    d_y: np.ndarray
    d_jy: np.ndarray
    d_u: np.ndarray
    t: float
    x: float
    path: BrownianPath

    @property
    def step(self) -> float:
        return float(self.alphas[1] - self.alphas[0])

    def norm_sq_du(self) -> float:
        return h_inner(self.d_u, self.d_u, self.step)


def du_profile(drift: DriftSpec, ic: InitialConditionSpec, traj: BackwardTrajectory) -> DerivativeProfile:
    """All first-order profiles for a trajectory anchored at s=0."""
    _require_zero_anchor(traj)
    grid = traj.path.grid
    pad = grid.index_of(traj.t) < grid.n_steps
    fo = _engine.first_order(drift, ic, traj.times, traj.values[None, :], pad_tail=pad)
    return DerivativeProfile(
        alphas=grid.times,
        d_y=_full_profile(grid, fo.d_y[0], 0),
        d_jy=_full_profile(grid, fo.d_jy[0], 0),
        d_u=_full_profile(grid, fo.d_u[0], 0),
        t=traj.t,
        x=traj.x,
        path=traj.path,
    )


@dataclass(frozen=True)
class SecondDerivativeProfile:
    """Matrices (alpha, beta) -> d2Y, d2JY, d2u on the full grid squared."""

    alphas: np.ndarray
    d2_y: np.ndarray
    d2_jy: np.ndarray
    d2_u: np.ndarray
    t: float
    x: float


def d2u_profile(drift: DriftSpec, ic: InitialConditionSpec, traj: BackwardTrajectory) -> SecondDerivativeProfile:
    """Second-derivative matrices for a trajectory anchored at s=0; support
    confined to [0, t]^2 with exact zeros outside."""
    _require_zero_anchor(traj)
    grid = traj.path.grid
    k_hi = grid.index_of(traj.t)
    d2y, d2jy, d2u = _engine.second_order_matrices(drift, ic, traj.times, traj.values)
    n = grid.n_steps + 1
    if k_hi + 1 < n:
        full = []
        for block in (d2y, d2jy, d2u):
            mat = np.zeros((n, n))
            mat[: k_hi + 1, : k_hi + 1] = block
            full.append(mat)
        d2y, d2jy, d2u = full
    return SecondDerivativeProfile(
        alphas=grid.times, d2_y=d2y, d2_jy=d2jy, d2_u=d2u, t=traj.t, x=traj.x
    )


@dataclass(frozen=True)
class MalliavinReport:
    """Per-path audit of the sign structure and derivative bounds.

    Each entry of `checks` is True/False, or None when not applicable
    (bound checks for out-of-window paths, sign/positivity checks whose
    hypothesis fails, the c5 check without cc11 and cc22).
    """

    norm_sq: float
    a1: float
    a2: float
    a3: float
    jy: float
    u: float
    y_start: float
    in_window: bool
    decomposition_rel_err: float
    checks: dict
    second_order_sups: dict | None = None

    @property
    def passed(self) -> bool:
        return all(v for v in self.checks.values() if v is not None)

    def to_dict(self) -> dict:
        return {
            "norm_sq": self.norm_sq,
            "a1": self.a1,
            "a2": self.a2,
            "a3": self.a3,
            "jy": self.jy,
            "u": self.u,
            "y_start": self.y_start,
            "in_window": self.in_window,
            "decomposition_rel_err": self.decomposition_rel_err,
            "checks": dict(self.checks),
            "second_order_sups": self.second_order_sups,
            "passed": self.passed,
        }


_DECOMP_RTOL = 1e-10


def _audit_checks(
    consts: BoundConstants,
    *,
    in_window: bool,
    dy_max: float,
    djy_max: float,
    jy: float,
    dy_abs: float,
    djy_abs: float,
    du_abs: float,
    a1: float,
    a2: float,
    a3: float,
    norm_sq: float,
) -> tuple[dict, float]:
    hyp = consts.hypotheses
    decomp = a1 + a2 + a3
    scale = max(abs(norm_sq), abs(decomp), 1e-300)
    rel_err = abs(norm_sq - decomp) / scale
    checks = {
        "dy_nonpositive": bool(dy_max <= 0.0),
        "jy_positive": bool(jy > 0.0),
        "djy_nonpositive": bool(djy_max <= 0.0) if hyp.cc1 else None,
        "decomposition": bool(rel_err <= _DECOMP_RTOL),
        "a1_positive": bool(a1 > 0.0) if hyp.cc2 else None,
        "a2_nonnegative": bool(a2 >= 0.0) if hyp.cc2 else None,
        "a3_nonnegative": bool(a3 >= 0.0) if hyp.cc2 else None,
    }
    if in_window:
        checks.update(
            {
                "dy_within_c1": bool(dy_abs <= consts.c1),
                "jy_within_c1": bool(abs(jy) <= consts.c1),
                "djy_within_c2": bool(djy_abs <= consts.c2),
                "du_within_c3": bool(du_abs <= consts.c3),
            }
        )
        if consts.c5 is not None and hyp.cc22:
            checks["norm_sq_at_least_c5"] = bool(norm_sq >= consts.c5)
        else:
            checks["norm_sq_at_least_c5"] = None
    else:
        for name in (
            "dy_within_c1",
            "jy_within_c1",
            "djy_within_c2",
            "du_within_c3",
            "norm_sq_at_least_c5",
        ):
            checks[name] = None
    return checks, rel_err


def bounds_report(
    drift: DriftSpec,
    ic: InitialConditionSpec,
    consts: BoundConstants,
    traj: BackwardTrajectory,
    *,
    second_order: bool = False,
) -> MalliavinReport:
    """Audit one trajectory against the constants computed for its scenario.

    The window used for the exit flag is the one the constants were derived
    on.  With second_order=True the full (alpha, beta) matrices are built
    and their sups checked against c2, the d2JY bound and c4.
    """
    _require_zero_anchor(traj)
    grid = traj.path.grid
    pad = grid.index_of(traj.t) < grid.n_steps
    fo = _engine.first_order(drift, ic, traj.times, traj.values[None, :], pad_tail=pad)
    window = consts.hypotheses.window
    in_window = bool(np.all(window.contains(traj.values)))
    checks, rel_err = _audit_checks(
        consts,
        in_window=in_window,
        dy_max=float(np.max(fo.d_y)),
        djy_max=float(np.max(fo.d_jy)),
        jy=float(fo.jy[0]),
        dy_abs=float(np.max(np.abs(fo.d_y))),
        djy_abs=float(np.max(np.abs(fo.d_jy))),
        du_abs=float(np.max(np.abs(fo.d_u))),
        a1=float(fo.a1[0]),
        a2=float(fo.a2[0]),
        a3=float(fo.a3[0]),
        norm_sq=float(fo.norm_sq_du[0]),
    )
    second = None
    if second_order:
        d2y, d2jy, d2u = _engine.second_order_matrices(drift, ic, traj.times, traj.values)
        second = {
            "d2y_abs_sup": float(np.max(np.abs(d2y))),
            "d2jy_abs_sup": float(np.max(np.abs(d2jy))),
            "d2u_abs_sup": float(np.max(np.abs(d2u))),
        }
        if in_window:
            checks["d2y_within_c2"] = bool(second["d2y_abs_sup"] <= consts.c2)
            checks["d2jy_within_bound"] = bool(second["d2jy_abs_sup"] <= consts.d2jy_bound)
            checks["d2u_within_c4"] = bool(second["d2u_abs_sup"] <= consts.c4)
        else:
            checks["d2y_within_c2"] = None
            checks["d2jy_within_bound"] = None
            checks["d2u_within_c4"] = None
    return MalliavinReport(
        norm_sq=float(fo.norm_sq_du[0]),
        a1=float(fo.a1[0]),
        a2=float(fo.a2[0]),
        a3=float(fo.a3[0]),
        jy=float(fo.jy[0]),
        u=float(fo.u[0]),
        y_start=float(traj.values[0]),
        in_window=in_window,
        decomposition_rel_err=rel_err,
        checks=checks,
        second_order_sups=second,
    )


@dataclass
class BoundsAudit:
    """Aggregate of per-path audits over a Monte Carlo batch.

    Arrays are aligned with path indices seed-side, so the audit is
    reproducible path by path.
    """

    n_paths: int
    t: float
    x: float
    seed: int
    norm_sq: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    a3: np.ndarray
    u: np.ndarray
    in_window: np.ndarray
    diverged: np.ndarray
    check_failures: dict
    n_in_window: int
    n_diverged: int
    n_exited: int
    min_norm_sq_in_window: float
    all_checks_pass: bool
    second_order_failures: dict | None = None

    def to_dict(self) -> dict:
        return {
            "n_paths": self.n_paths,
            "t": self.t,
            "x": self.x,
            "seed": self.seed,
            "n_in_window": self.n_in_window,
            "n_diverged": self.n_diverged,
            "n_exited": self.n_exited,
            "min_norm_sq_in_window": self.min_norm_sq_in_window,
            "check_failures": dict(self.check_failures),
            "second_order_failures": self.second_order_failures,
            "all_checks_pass": self.all_checks_pass,
        }


def audit_bounds(
    drift: DriftSpec,
    ic: InitialConditionSpec,
    consts: BoundConstants,
    grid: TimeGrid,
    t: float,
    x: float,
    *,
    seed: int,
    n_paths: int,
    threads: int = 1,
    chunk: int = 2048,
    second_order_paths: int = 0,
) -> BoundsAudit:
    """Monte Carlo audit: simulate n_paths backward trajectories and count
    violations of every applicable sign and bound check.

    Out-of-window paths have their bound checks skipped (not counted as
    failures); diverged paths are excluded from all checks and counted.
    second_order_paths > 0 additionally audits the second-derivative sups
    on that many of the first non-diverged paths.
    """
    k_hi = grid.index_of(t)
    times = grid.times[: k_hi + 1]
    pad = k_hi < grid.n_steps
    window = consts.hypotheses.window
    hyp = consts.hypotheses

    def work(start, stop):
        inc = sample_increments(grid, seed, np.arange(start, stop))[:, :k_hi]
        return _engine.run_pipeline(
            drift, ic, times, inc, x, window, pad_tail=pad, keep_du=False
        )

    batches = _engine.parallel_ranges(n_paths, chunk, threads, work)
    cat = lambda name: np.concatenate([getattr(b, name) for b in batches])
    u = cat("u")
    norm_sq = cat("norm_sq")
    a1, a2, a3 = cat("a1"), cat("a2"), cat("a3")
    jy = cat("jy")
    in_window = cat("in_window")
    diverged = cat("diverged")
    dy_max, djy_max = cat("dy_max"), cat("djy_max")
    dy_abs, djy_abs, du_abs = cat("dy_abs_sup"), cat("djy_abs_sup"), cat("du_abs_sup")

    alive = ~diverged
    decomp = a1 + a2 + a3
    scale = np.maximum(np.maximum(np.abs(norm_sq), np.abs(decomp)), 1e-300)
    with np.errstate(invalid="ignore"):
        rel_err = np.abs(norm_sq - decomp) / scale
        failures = {
            "dy_nonpositive": int(np.sum(alive & (dy_max > 0.0))),
            "jy_positive": int(np.sum(alive & ~(jy > 0.0))),
            "decomposition": int(np.sum(alive & (rel_err > _DECOMP_RTOL))),
        }
        if hyp.cc1:
            failures["djy_nonpositive"] = int(np.sum(alive & (djy_max > 0.0)))
        if hyp.cc2:
            failures["a1_positive"] = int(np.sum(alive & ~(a1 > 0.0)))
            failures["a2_nonnegative"] = int(np.sum(alive & (a2 < 0.0)))
            failures["a3_nonnegative"] = int(np.sum(alive & (a3 < 0.0)))
        failures["dy_within_c1"] = int(np.sum(in_window & (dy_abs > consts.c1)))
        failures["jy_within_c1"] = int(np.sum(in_window & (np.abs(jy) > consts.c1)))
        failures["djy_within_c2"] = int(np.sum(in_window & (djy_abs > consts.c2)))
        failures["du_within_c3"] = int(np.sum(in_window & (du_abs > consts.c3)))
        if consts.c5 is not None and hyp.cc22:
            failures["norm_sq_at_least_c5"] = int(np.sum(in_window & (norm_sq < consts.c5)))

    second_failures = None
    if second_order_paths > 0:
        second_failures = {"d2y_within_c2": 0, "d2jy_within_bound": 0, "d2u_within_c4": 0}
        audited = 0
        idx = 0
        while audited < second_order_paths and idx < n_paths:
            if not diverged[idx]:
                inc = sample_increments(grid, seed, [idx])[0, :k_hi]
                y, _ = _engine._euler_backward(drift, times, inc[None, :], x)
                d2y, d2jy, d2u = _engine.second_order_matrices(drift, ic, times, y[0])
                if in_window[idx]:
                    second_failures["d2y_within_c2"] += int(np.max(np.abs(d2y)) > consts.c2)
                    second_failures["d2jy_within_bound"] += int(
                        np.max(np.abs(d2jy)) > consts.d2jy_bound
                    )
                    second_failures["d2u_within_c4"] += int(np.max(np.abs(d2u)) > consts.c4)
                audited += 1
            idx += 1

    min_norm = float(np.min(norm_sq[in_window])) if np.any(in_window) else float("nan")
    all_pass = all(v == 0 for v in failures.values()) and (
        second_failures is None or all(v == 0 for v in second_failures.values())
    )
    return BoundsAudit(
        n_paths=n_paths,
        t=float(t),
        x=float(x),
        seed=int(seed),
        norm_sq=norm_sq,
        a1=a1,
        a2=a2,
        a3=a3,
        u=u,
        in_window=in_window,
        diverged=diverged,
        check_failures=failures,
        n_in_window=int(np.sum(in_window)),
        n_diverged=int(np.sum(diverged)),
        n_exited=int(np.sum(~in_window & ~diverged)),
        min_norm_sq_in_window=min_norm,
        all_checks_pass=all_pass,
        second_order_failures=second_failures,
    )


def dump_profile_csv(profile: DerivativeProfile, fileobj) -> None:
    """Debug dump with header alpha,dY,dJY,du."""
    fileobj.write("alpha,dY,dJY,du\n")
    for a, y, j, u in zip(profile.alphas, profile.d_y, profile.d_jy, profile.d_u):
        fileobj.write(f"{a:.17g},{y:.17g},{j:.17g},{u:.17g}\n")
