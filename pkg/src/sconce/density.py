"""Monte Carlo estimation of the law of u(t, x) and verification of the
density properties: strict positivity of the derivative norm (existence of
a density), Gaussian-envelope sandwich bounds obtained from the mixture
coupling of two independent noise paths, and polynomial tail decay.

Out-of-window and diverged paths are excluded from density estimation and
counted; a run that excludes more than EXCLUSION_TOLERANCE of its paths is
reported as failing validation, since silent truncation would bias the
estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _engine
from .errors import DegenerateSampleError
from .paths import TimeGrid, sample_increments
from .scenario import BoundConstants, DriftSpec, InitialConditionSpec

#: fraction of excluded (diverged or out-of-window) paths above which a
#: density run fails validation
EXCLUSION_TOLERANCE = 0.01

#: index offset separating the independent-companion path stream from the
#: primary sample stream under the same seed
PRIME_INDEX_OFFSET = 1 << 32

#: roughness int K^2 of the standard normal kernel
_GAUSS_ROUGHNESS = 1.0 / (2.0 * math.sqrt(math.pi))

_DEFAULT_THETA_NODES = (0.1, 0.5, 1.0, 2.0, 4.0)


@dataclass(frozen=True)
class SampleSet:
    """Solution samples at one (t, x) with per-sample diagnostics."""

    values: np.ndarray
    norm_sq: np.ndarray  # ||Du||_H^2 per sample
    in_window: np.ndarray
    diverged: np.ndarray
    t: float
    x: float
    seed: int

    def __post_init__(self):
        n = len(self.values)
        if n < 1:
            raise ValueError("SampleSet needs at least one sample")
        for name in ("norm_sq", "in_window", "diverged"):
            if len(getattr(self, name)) != n:
                raise ValueError("diagnostics must align 1:1 with samples")

    @property
    def n(self) -> int:
        return len(self.values)

    @property
    def valid(self) -> np.ndarray:
        return self.in_window & ~self.diverged

    @property
    def n_valid(self) -> int:
        return int(np.sum(self.valid))

    @property
    def n_diverged(self) -> int:
        return int(np.sum(self.diverged))

    @property
    def exclusion_fraction(self) -> float:
        return 1.0 - self.n_valid / self.n

    def valid_values(self) -> np.ndarray:
        return self.values[self.valid]


def sample_solution(
    drift: DriftSpec,
    ic: InitialConditionSpec,
    grid: TimeGrid,
    t: float,
    x: float,
    n: int,
    seed: int,
    *,
    window,
    threads: int = 1,
    chunk: int = 4096,
) -> SampleSet:
    """n independent solution samples with Malliavin diagnostics.

    Sample i uses the path stream (seed, i), so the set is a deterministic
    function of (configuration, seed) regardless of chunking or threads.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    k_hi = grid.index_of(t)
    times = grid.times[: k_hi + 1]
    pad = k_hi < grid.n_steps

    def work(start, stop):
        inc = sample_increments(grid, seed, np.arange(start, stop))[:, :k_hi]
        return _engine.run_pipeline(drift, ic, times, inc, x, window, pad_tail=pad)

    batches = _engine.parallel_ranges(n, chunk, threads, work)
    return SampleSet(
        values=np.concatenate([b.u for b in batches]),
        norm_sq=np.concatenate([b.norm_sq for b in batches]),
        in_window=np.concatenate([b.in_window for b in batches]),
        diverged=np.concatenate([b.diverged for b in batches]),
        t=float(t),
        x=float(x),
        seed=int(seed),
    )


@dataclass(frozen=True)
class DensityEstimate:
    """Gaussian-kernel density estimate on a uniform z grid.

    The grid spans the sample mean plus/minus 5 scale units, where the
    scale is max(sample sd, bandwidth) so the kernel mass stays on the
    grid; with the automatic bandwidth this is exactly mean +/- 5 sd.
    """

    z: np.ndarray
    rho: np.ndarray
    se: np.ndarray
    bandwidth: float
    n: int
    mass: float

    def __post_init__(self):
        if np.any(self.rho < 0):
            raise ValueError("density estimate must be nonnegative")
        if not 0.98 <= self.mass <= 1.001:
            raise ValueError(f"density mass {self.mass:.6f} outside [0.98, 1.001]")

    @property
    def step(self) -> float:
        return float(self.z[1] - self.z[0])


def kde(samples, bandwidth="auto", z_nodes: int = 512) -> DensityEstimate:
    """Gaussian-kernel estimate of the sample density.

    `samples` is a SampleSet (only valid samples are used) or a plain
    array.  bandwidth "auto" uses 1.06 * sd * n^(-1/5); the pointwise
    standard error is sqrt(rho * R(K) / (n * bandwidth)) with R(K) the
    kernel roughness.
    """
    if isinstance(samples, SampleSet):
        data = samples.valid_values()
    else:
        data = np.asarray(samples, dtype=float)
    data = data[np.isfinite(data)]
    n = len(data)
    if n < 1:
        raise DegenerateSampleError("no finite samples to estimate from")
    sd = float(np.std(data))
    if bandwidth == "auto":
        if n < 2:
            raise DegenerateSampleError("auto bandwidth needs at least 2 samples")
        if sd == 0.0:
            raise DegenerateSampleError("auto bandwidth undefined for identical samples")
        bw = 1.06 * sd * n ** (-0.2)
    else:
        bw = float(bandwidth)
        if not bw > 0:
            raise ValueError("bandwidth must be positive")
    mean = float(np.mean(data))
    scale = max(sd, bw)
    z = np.linspace(mean - 5.0 * scale, mean + 5.0 * scale, z_nodes)
    rho = np.zeros(z_nodes)
    inv = 1.0 / bw
    norm = 1.0 / math.sqrt(2.0 * math.pi)
    for start in range(0, n, 10_000):
        blk = data[start : start + 10_000]
        r = (z[:, None] - blk[None, :]) * inv
        rho += norm * np.exp(-0.5 * r * r).sum(axis=1)
    rho /= n * bw
    se = np.sqrt(rho * _GAUSS_ROUGHNESS / (n * bw))
    return DensityEstimate(
        z=z,
        rho=rho,
        se=se,
        bandwidth=bw,
        n=n,
        mass=float(np.trapezoid(rho, z)),
    )


@dataclass(frozen=True)
class BouleauHirschReport:
    """Positivity audit of ||Du||_H^2 over the sampled paths."""

    min_norm_sq: float
    positive: bool
    n_valid: int
    c5: float | None = None
    meets_c5: bool | None = None

    def to_dict(self) -> dict:
        return {
            "min_norm_sq": self.min_norm_sq,
            "positive": self.positive,
            "n_valid": self.n_valid,
            "c5": self.c5,
            "meets_c5": self.meets_c5,
        }


def bouleau_hirsch_check(
    samples: SampleSet, consts: BoundConstants | None = None
) -> BouleauHirschReport:
    """Minimum of the squared derivative norm over valid samples; passes when
    strictly positive.  When constants with an available c5 are supplied
    (concavity and positivity hypotheses hold), also compares against c5."""
    valid = samples.valid
    if not np.any(valid):
        return BouleauHirschReport(min_norm_sq=float("nan"), positive=False, n_valid=0)
    mn = float(np.min(samples.norm_sq[valid]))
    c5 = None
    meets = None
    if consts is not None and consts.c5 is not None and consts.hypotheses.cc22:
        c5 = consts.c5
        meets = bool(mn >= c5)
    return BouleauHirschReport(
        min_norm_sq=mn,
        positive=bool(mn > 0.0),
        n_valid=int(np.sum(valid)),
        c5=c5,
        meets_c5=meets,
    )


@dataclass(frozen=True)
class SandwichBounds:
    """Parameters of the Gaussian envelope pair for the density of u(t, x).

    Empirical gamma bounds are the min/max of the sampled inner products
    <Du(w), Du(w~)> over mixture couplings w~ of w with an independent
    path, across all theta nodes; 1% and 99% quantiles quantify how noisy
    those extremes are.  Analytic values come from the closed-form
    constants: gamma_min^2 = c5(t), gamma_max^2 = c3^2 * horizon.
    """

    t: float
    x: float
    m: float  # sample mean of u
    abs_dev: float  # sample mean of |u - m|
    gamma_sq_min: float
    gamma_sq_max: float
    gamma_sq_q01: float
    gamma_sq_q99: float
    gamma_sq_min_analytic: float | None
    gamma_sq_max_analytic: float
    theta_nodes: tuple
    n_pairs_per_theta: int
    n_pairs_valid: int
    n_pairs_total: int
    nonpositive_inner_count: int
    per_theta: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if not self.gamma_sq_min <= self.gamma_sq_max:
            raise ValueError("gamma_sq_min must not exceed gamma_sq_max")

    def _gammas(self, variant: str):
        if variant == "empirical":
            return self.gamma_sq_min, self.gamma_sq_max
        if variant == "analytic":
            if self.gamma_sq_min_analytic is None:
                raise ValueError("analytic gamma_min unavailable (cc11 fails)")
            return self.gamma_sq_min_analytic, self.gamma_sq_max_analytic
        raise ValueError(f"unknown variant {variant!r}")

    def lower_envelope(self, z, variant: str = "empirical"):
        g_min, g_max = self._gammas(variant)
        z = np.asarray(z, dtype=float)
        return self.abs_dev / (2.0 * g_max) * np.exp(-((z - self.m) ** 2) / (2.0 * g_min))

    def upper_envelope(self, z, variant: str = "empirical"):
        g_min, g_max = self._gammas(variant)
        z = np.asarray(z, dtype=float)
        return self.abs_dev / (2.0 * g_min) * np.exp(-((z - self.m) ** 2) / (2.0 * g_max))

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "x": self.x,
            "m": self.m,
            "abs_dev": self.abs_dev,
            "gamma_sq_min": self.gamma_sq_min,
            "gamma_sq_max": self.gamma_sq_max,
            "gamma_sq_q01": self.gamma_sq_q01,
            "gamma_sq_q99": self.gamma_sq_q99,
            "gamma_sq_min_analytic": self.gamma_sq_min_analytic,
            "gamma_sq_max_analytic": self.gamma_sq_max_analytic,
            "theta_nodes": list(self.theta_nodes),
            "n_pairs_per_theta": self.n_pairs_per_theta,
            "n_pairs_valid": self.n_pairs_valid,
            "n_pairs_total": self.n_pairs_total,
            "nonpositive_inner_count": self.nonpositive_inner_count,
            "per_theta": [dict(d) for d in self.per_theta],
        }


def sandwich(
    drift: DriftSpec,
    ic: InitialConditionSpec,
    grid: TimeGrid,
    t: float,
    x: float,
    *,
    consts: BoundConstants,
    n_paths: int,
    n_prime: int,
    seed: int,
    t0: float,
    theta_nodes=_DEFAULT_THETA_NODES,
    samples: SampleSet | None = None,
    threads: int = 1,
    chunk: int = 1024,
) -> SandwichBounds:
    """Estimate the Gaussian-envelope parameters by the mixture coupling.

    For each theta node and pair index j, the primary path j is mixed with
    the independent companion path (PRIME_INDEX_OFFSET + j) into
    exp(-theta) w + sqrt(1 - exp(-2 theta)) w', the whole derivative
    pipeline is re-run on the mixture, and the inner product
    <Du(w), Du(w~)> is recorded.  theta = 0 is always included as a
    control; there the mixture equals w and the inner product is exactly
    ||Du(w)||^2.

    Pairs where either trajectory diverges or leaves the window are
    excluded from the extremes and counted.  Runs with t below the
    regularization floor t0 are refused.
    """
    if t < t0:
        raise ValueError(f"sandwich needs t >= t0 ({t!r} < {t0!r})")
    window = consts.hypotheses.window
    if samples is None:
        samples = sample_solution(
            drift, ic, grid, t, x, n_paths, seed, window=window, threads=threads
        )
    u_valid = samples.valid_values()
    if len(u_valid) == 0:
        raise DegenerateSampleError("no valid samples for sandwich estimation")
    m_hat = float(np.mean(u_valid))
    d_hat = float(np.mean(np.abs(u_valid - m_hat)))

    nodes = tuple(float(v) for v in theta_nodes)
    if 0.0 not in nodes:
        nodes = (0.0,) + nodes
    k_hi = grid.index_of(t)
    times = grid.times[: k_hi + 1]
    pad = k_hi < grid.n_steps
    h = grid.step

    def base_work(start, stop):
        inc = sample_increments(grid, seed, np.arange(start, stop))[:, :k_hi]
        batch = _engine.run_pipeline(
            drift, ic, times, inc, x, window, pad_tail=pad, keep_du=True
        )
        return inc, batch

    base = _engine.parallel_ranges(n_prime, chunk, threads, base_work)
    base_inc = np.concatenate([b[0] for b in base])
    base_du = np.concatenate([b[1].d_u for b in base])
    base_ok = np.concatenate([b[1].in_window & ~b[1].diverged for b in base])
    prime_inc = sample_increments(
        grid, seed, PRIME_INDEX_OFFSET + np.arange(n_prime)
    )[:, :k_hi]

    per_theta = []
    inners_all = []
    valid_all = []
    for theta in nodes:
        w = math.exp(-theta)
        mixed = w * base_inc + math.sqrt(max(0.0, 1.0 - w * w)) * prime_inc

        def mix_work(start, stop):
            return _engine.run_pipeline(
                drift, ic, times, mixed[start:stop], x, window, pad_tail=pad, keep_du=True
            )

        mixes = _engine.parallel_ranges(n_prime, chunk, threads, mix_work)
        mix_du = np.concatenate([b.d_u for b in mixes])
        mix_ok = np.concatenate([b.in_window & ~b.diverged for b in mixes])
        inner = _engine._inner_padded(base_du, mix_du, h, pad)
        ok = base_ok & mix_ok
        inners_all.append(inner)
        valid_all.append(ok)
        sel = inner[ok]
        per_theta.append(
            {
                "theta": theta,
                "n_valid": int(np.sum(ok)),
                "min": float(np.min(sel)) if sel.size else float("nan"),
                "max": float(np.max(sel)) if sel.size else float("nan"),
                "mean": float(np.mean(sel)) if sel.size else float("nan"),
            }
        )

    inner = np.concatenate(inners_all)
    ok = np.concatenate(valid_all)
    sel = inner[ok]
    if sel.size == 0:
        raise DegenerateSampleError("no valid coupling pairs for sandwich estimation")
    nonpos = int(np.sum(sel <= 0.0))
    return SandwichBounds(
        t=float(t),
        x=float(x),
        m=m_hat,
        abs_dev=d_hat,
        gamma_sq_min=float(np.min(sel)),
        gamma_sq_max=float(np.max(sel)),
        gamma_sq_q01=float(np.quantile(sel, 0.01)),
        gamma_sq_q99=float(np.quantile(sel, 0.99)),
        gamma_sq_min_analytic=consts.c5,
        gamma_sq_max_analytic=consts.c3**2 * consts.horizon,
        theta_nodes=nodes,
        n_pairs_per_theta=n_prime,
        n_pairs_valid=int(np.sum(ok)),
        n_pairs_total=int(len(nodes) * n_prime),
        nonpositive_inner_count=nonpos,
        per_theta=tuple(per_theta),
    )


@dataclass(frozen=True)
class EnvelopeReport:
    """Pointwise envelope verification on a z region."""

    passed: bool
    n_checked: int
    n_violations: int
    violations: tuple
    variant: str
    z_lo: float
    z_hi: float
    region_clipped: bool

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "n_checked": self.n_checked,
            "n_violations": self.n_violations,
            "violations": [dict(v) for v in self.violations],
            "variant": self.variant,
            "z_lo": self.z_lo,
            "z_hi": self.z_hi,
            "region_clipped": self.region_clipped,
        }


def envelope_check(
    density: DensityEstimate,
    bounds: SandwichBounds,
    z_lo: float,
    z_hi: float,
    variant: str = "empirical",
) -> EnvelopeReport:
    """Check lower(z) - 3 SE <= rho_hat(z) <= upper(z) + 3 SE on the region.

    Nodes outside the density grid cannot be tested (the KDE is unreliable
    beyond its 5-scale range); the report flags whether the requested
    region was clipped to the grid.
    """
    sel = (density.z >= z_lo) & (density.z <= z_hi)
    z = density.z[sel]
    rho = density.rho[sel]
    se = density.se[sel]
    low = bounds.lower_envelope(z, variant)
    up = bounds.upper_envelope(z, variant)
    bad_lo = rho < low - 3.0 * se
    bad_hi = rho > up + 3.0 * se
    violations = []
    for i in np.nonzero(bad_lo | bad_hi)[0]:
        margin = max(float(low[i] - 3.0 * se[i] - rho[i]), float(rho[i] - up[i] - 3.0 * se[i]))
        violations.append(
            {
                "z": float(z[i]),
                "rho": float(rho[i]),
                "lower": float(low[i]),
                "upper": float(up[i]),
                "margin": margin,
            }
        )
    clipped = bool(z_lo < density.z[0] or z_hi > density.z[-1])
    return EnvelopeReport(
        passed=not violations,
        n_checked=int(sel.sum()),
        n_violations=len(violations),
        violations=tuple(violations),
        variant=variant,
        z_lo=float(z_lo),
        z_hi=float(z_hi),
        region_clipped=clipped,
    )


@dataclass(frozen=True)
class TailReport:
    """Verdict of the polynomial tail-decay check."""

    passed: bool
    passed_right: bool
    passed_left: bool
    p: int
    q: float
    z_right: float
    z_left: float
    slope_right: float | None
    slope_left: float | None
    n_untested: int
    first_violation: dict | None = None

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "passed_right": self.passed_right,
            "passed_left": self.passed_left,
            "p": self.p,
            "q": self.q,
            "z_right": self.z_right,
            "z_left": self.z_left,
            "slope_right": self.slope_right,
            "slope_left": self.slope_left,
            "n_untested": self.n_untested,
            "first_violation": self.first_violation,
        }


_TAIL_SLACK = 1.1  # multiplicative slack per grid step

#: per-step scanning skips nodes below this many single-kernel peak heights;
#: past that the estimate is isolated-sample noise and certifies nothing
_TAIL_SCAN_KERNELS = 2.5

#: the asymptotic slope fit uses nodes supported by at least this many kernels
_TAIL_FIT_KERNELS = 5.0

#: minimal number of supported nodes for a meaningful slope fit per side
_TAIL_FIT_MIN_NODES = 12

#: the outer-region slope of log(|z|^p rho) vs log|z| must fall below this;
#: calibrated so genuinely decaying weighted tails sit far below (normal
#: samples with p=4 fit near -5.5) while non-vanishing ones sit near 0
#: (Cauchy with p=2)
_TAIL_SLOPE_MAX = -2.0


def _kernel_peak(density: DensityEstimate) -> float:
    return 1.0 / math.sqrt(2.0 * math.pi) / (density.n * density.bandwidth)


def tail_check(density: DensityEstimate, p: int, q: float) -> TailReport:
    """Verify |z|^p * rho_hat(z) decays when moving outward beyond the
    q-quantile on each side.

    Two complementary checks, both restricted to the region where the
    estimate carries information (a KDE's extreme tail is isolated-sample
    noise):

      * stepwise: the weighted values may never rise by more than 10% per
        grid step plus a one-kernel noise allowance, over nodes with at
        least a few kernels of support;
      * asymptotic: on each side with enough supported nodes, the fitted
        slope of log(|z|^p rho_hat) against log|z| over the outer region
        must be decisively negative, which a non-vanishing weighted tail
        (the heavy-tail signature) cannot produce.

    Sides with too few supported nodes are recorded as untested.
    """
    if p < 0:
        raise ValueError("p must be a nonnegative integer")
    if not 0.5 < q < 1.0:
        raise ValueError("q must lie in (0.5, 1)")
    z = density.z
    rho = density.rho
    cdf = np.concatenate(([0.0], np.cumsum(np.diff(z) * 0.5 * (rho[1:] + rho[:-1]))))
    cdf /= cdf[-1]
    i_right = int(np.searchsorted(cdf, q))
    i_left = int(np.searchsorted(cdf, 1.0 - q))
    weighted = np.abs(z) ** p * rho
    atol = 1e-12 * max(float(np.max(weighted)), 1.0)
    peak = _kernel_peak(density)
    scan_floor = _TAIL_SCAN_KERNELS * peak

    first_violation = None
    n_untested = 0

    def scan(indices):
        nonlocal first_violation, n_untested
        prev = None
        for pos, i in enumerate(indices):
            if rho[i] < scan_floor:
                n_untested += len(indices) - pos
                return True
            cur = weighted[i]
            if prev is not None:
                noise_guard = np.abs(z[i]) ** p * peak
                if cur > _TAIL_SLACK * prev + noise_guard + atol:
                    if first_violation is None:
                        first_violation = {
                            "z": float(z[i]),
                            "value": float(cur),
                            "previous": float(prev),
                        }
                    return False
            prev = cur
        return True

    def outer_slope(side: str) -> float | None:
        fit_floor = _TAIL_FIT_KERNELS * peak
        if side == "right":
            idx = np.arange(i_right, len(z))
            idx = idx[(rho[idx] >= fit_floor) & (z[idx] > 0)]
        else:
            idx = np.arange(0, i_left + 1)
            idx = idx[(rho[idx] >= fit_floor) & (z[idx] < 0)]
        if len(idx) < _TAIL_FIT_MIN_NODES:
            return None
        k = len(idx) // 3
        idx = idx[k:] if side == "right" else idx[: len(idx) - k]
        logs = np.log(np.abs(z[idx]))
        vals = np.log(np.maximum(weighted[idx], 1e-300))
        return float(np.polyfit(logs, vals, 1)[0])

    slope_right = outer_slope("right")
    slope_left = outer_slope("left")
    ok_right = scan(range(i_right, len(z))) and (
        slope_right is None or slope_right <= _TAIL_SLOPE_MAX
    )
    ok_left = scan(range(i_left, -1, -1)) and (
        slope_left is None or slope_left <= _TAIL_SLOPE_MAX
    )
    return TailReport(
        passed=ok_right and ok_left,
        passed_right=ok_right,
        passed_left=ok_left,
        p=int(p),
        q=float(q),
        z_right=float(z[i_right]),
        z_left=float(z[i_left]),
        slope_right=slope_right,
        slope_left=slope_left,
        n_untested=n_untested,
        first_violation=first_violation,
    )


def write_samples_csv(samples: SampleSet, fileobj) -> None:
    """Samples file with header index,u,du_norm_sq,in_window."""
    fileobj.write("index,u,du_norm_sq,in_window\n")
    ok = samples.in_window & ~samples.diverged
    for i in range(samples.n):
        fileobj.write(
            f"{i},{samples.values[i]:.17g},{samples.norm_sq[i]:.17g},{int(ok[i])}\n"
        )


def write_density_csv(
    density: DensityEstimate, bounds: SandwichBounds | None, fileobj
) -> None:
    """Density file with header z,rho_hat,se,lower_env,upper_env; envelope
    columns are NaN when no sandwich bounds accompany the estimate."""
    if bounds is not None:
        low = bounds.lower_envelope(density.z)
        up = bounds.upper_envelope(density.z)
    else:
        low = up = np.full_like(density.z, np.nan)
    fileobj.write("z,rho_hat,se,lower_env,upper_env\n")
    for i in range(len(density.z)):
        fileobj.write(
            f"{density.z[i]:.17g},{density.rho[i]:.17g},{density.se[i]:.17g},"
            f"{low[i]:.17g},{up[i]:.17g}\n"
        )
