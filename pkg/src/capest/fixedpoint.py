"""Single-cell WLAN analytical model: coupled attempt-rate/collision equations,
the load-to-service-rate map Psi, its fixed point by bisection, the damped
capacity iteration, and numerical shape verification of the beta-space map.

Internally everything is microsecond-based: lambda in packets/us. Callers
convert to packets/s at the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

INNER_TOL = 1e-13  # residual target of the (beta, gamma) solve


class ModelDomainError(ValueError):
    pass


class OverloadError(ModelDomainError):
    """Offered load admits no attempt-rate solution below saturation."""


@dataclass(frozen=True)
class WlanModel:
    """n contending stations, slot sigma, mean transmission time t_s (both us),
    and per-stage mean backoff windows b[0..k] in slots (k = retransmit limit)."""

    n: int
    sigma_us: float
    t_s_us: float
    b: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "b", tuple(float(x) for x in self.b))
        if self.n < 2:
            raise ModelDomainError(f"station count must be >= 2, got {self.n}")
        if not self.sigma_us > 0 or not self.t_s_us > 0:
            raise ModelDomainError("sigma and t_s must be > 0")
        if not self.b or any(x <= 0 for x in self.b):
            raise ModelDomainError("backoff stage means must be a nonempty positive list")

    @property
    def stages(self) -> int:
        return len(self.b) - 1

    @property
    def c(self) -> float:
        return self.n / (self.n - 1)


def canonical_backoff(b0: float = 16.0, stages: int = 7) -> tuple[float, ...]:
    """Doubling windows b_i = 2^i * b0, uncapped."""
    return tuple(b0 * 2**i for i in range(stages + 1))


def backoff_from_mac(cw_min: int, cw_max: int, stages: int = 7) -> tuple[float, ...]:
    """Mean windows of binary exponential backoff with a cap: min(2^i(cw_min+1), cw_max+1)/2."""
    return tuple(min(2**i * (cw_min + 1), cw_max + 1) / 2.0 for i in range(stages + 1))


@dataclass(frozen=True)
class FixedPointResult:
    lambda_star: float  # packets/us
    beta_star: float
    gamma_star: float
    iterations: int
    converged: bool
    trace: tuple[float, ...]
    psi_above_start: bool | None = None  # whether Psi(lambda_0) > lambda_0


def _gamma(beta: float, n: int) -> float:
    return 1.0 - (1.0 - beta) ** (n - 1)


def _service_time(model: WlanModel, gamma: float) -> float:
    poly = 0.0
    for b_i in reversed(model.b):
        poly = poly * gamma + b_i
    return poly * (model.sigma_us + model.c * gamma * model.t_s_us)


def solve_attempt_rate(
    model: WlanModel, lam: float, beta_init: float | None = None
) -> tuple[float, float]:
    """Solve the coupled attempt-rate/collision equations at offered load lam.

    beta satisfies beta = lam*sigma + lam*gamma(beta)*(sigma + c*t_s) with
    gamma(beta) = 1 - (1-beta)^(n-1). The map is increasing and concave in
    beta, so plain iteration from below (or from a warm start) is monotone;
    bisection covers the rare slow-contraction tail.
    """
    if lam < 0:
        raise ModelDomainError(f"lambda must be >= 0, got {lam}")
    if lam == 0:
        return 0.0, 0.0
    a = model.sigma_us + model.c * model.t_s_us

    def h(beta: float) -> float:
        return lam * model.sigma_us + lam * _gamma(beta, model.n) * a

    beta = lam * model.sigma_us if beta_init is None else beta_init
    if beta >= 1.0:
        raise OverloadError(f"lambda {lam} starts beyond saturation")
    for _ in range(5000):
        nxt = h(beta)
        if nxt >= 1.0:
            raise OverloadError(f"no attempt-rate solution below saturation at lambda {lam}")
        if abs(nxt - beta) <= 1e-16 + 1e-16 * beta:
            beta = nxt
            break
        beta = nxt
    if abs(h(beta) - beta) > INNER_TOL:
        beta = _bisect_attempt_rate(h, beta)
    return beta, _gamma(beta, model.n)


def _bisect_attempt_rate(h, lo: float) -> float:
    # Invariant: h(lo) >= lo. Grow an upper bracket, then bisect.
    if h(lo) < lo:
        lo, hi = 0.0, lo
    else:
        step = max(1e-9, lo * 1e-3)
        hi = lo + step
        while hi < 1.0 and h(hi) >= hi:
            lo, hi = hi, min(1.0, hi + step)
            step *= 2.0
        if hi >= 1.0 and h(hi if hi < 1.0 else 1.0 - 1e-15) >= hi:
            raise OverloadError("no attempt-rate solution below saturation")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if h(mid) >= mid:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-17:
            break
    return 0.5 * (lo + hi)


def psi(model: WlanModel, lam: float, beta_init: float | None = None) -> float:
    """Service rate 1/S at offered load lam, in packets/us. Psi(0) = 1/(b0*sigma)."""
    _, gamma = solve_attempt_rate(model, lam, beta_init)
    return 1.0 / _service_time(model, gamma)


def saturation_rate(model: WlanModel) -> float:
    """Service rate of a permanently backlogged station, in packets/us.

    Substituting lambda = 1/S into the attempt-rate equation closes the
    beta-space map f; its unique root is the saturated operating point, so
    the saturated service rate equals the fixed-point rate lambda*. Used to
    extend the load-to-rate map past the fold where the unsaturated solve
    has no solution: a station offered more than it can ever serve builds
    an unbounded queue and behaves exactly like a backlogged one.
    """
    lo, hi = 0.0, 1.0
    # f decreasing, f(0) = 1/b0 > 0, f(1) << 1: one sign change
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f_beta(model, mid) >= mid:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-17:
            break
    beta = 0.5 * (lo + hi)
    return 1.0 / _service_time(model, _gamma(beta, model.n))


def find_fixed_point(model: WlanModel, tol: float = 1e-9) -> FixedPointResult:
    """Unique root of g(lambda) = Psi(lambda) - lambda by bisection on [0, 1/(b0*sigma)].

    g is strictly decreasing; offered loads past saturation (no attempt-rate
    solution) count as negative sign, which keeps the upper endpoint usable.
    """
    hi = 1.0 / (model.b[0] * model.sigma_us)
    if not psi(model, 0.0) > 0:
        raise ModelDomainError("sign condition violated: Psi(0) <= 0")

    def g_sign(lam: float) -> float:
        try:
            return psi(model, lam) - lam
        except OverloadError:
            return -1.0

    if g_sign(hi) > 0:
        raise ModelDomainError("sign condition violated: Psi(hi) - hi > 0 at hi = 1/(b0*sigma)")
    lo = 0.0
    trace = []
    iterations = 0
    for _ in range(300):
        mid = 0.5 * (lo + hi)
        trace.append(mid)
        iterations += 1
        if g_sign(mid) > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 0.05 * tol * mid:
            break
    lam_star = 0.5 * (lo + hi)
    beta_star, gamma_star = solve_attempt_rate(model, lam_star)
    converged = abs(psi(model, lam_star) - lam_star) <= tol * lam_star
    return FixedPointResult(
        lambda_star=lam_star,
        beta_star=beta_star,
        gamma_star=gamma_star,
        iterations=iterations,
        converged=converged,
        trace=tuple(trace),
    )


def capest_iterate(
    model: WlanModel,
    lambda_0: float,
    alpha: float | None = None,
    tol: float = 1e-9,
    max_iter: int = 100000,
) -> FixedPointResult:
    """Damped iteration lambda <- (1-alpha)*Psi(lambda) + alpha*lambda.

    alpha defaults to 1 - 1/n. Converged when the relative step and the
    relative residual |Psi(lambda) - lambda| both fall within tol.
    """
    if alpha is None:
        alpha = 1.0 - 1.0 / model.n
    if not 0.0 < alpha < 1.0:
        raise ModelDomainError(f"alpha must be in (0, 1), got {alpha}")
    if lambda_0 < 0:
        raise ModelDomainError("lambda_0 must be >= 0")
    lam = lambda_0
    beta = None
    sat_rate = None
    trace = [lam]
    psi_above_start = None
    converged = False
    last_step = None
    for it in range(max_iter):
        try:
            beta_g = solve_attempt_rate(model, lam, beta_init=beta)
            beta = beta_g[0]
            psi_lam = 1.0 / _service_time(model, beta_g[1])
        except OverloadError:
            # past the fold the queue saturates; the measured rate is the
            # backlogged one, which keeps the damped update well defined
            if sat_rate is None:
                sat_rate = saturation_rate(model)
            beta = None
            psi_lam = sat_rate
        if psi_above_start is None:
            psi_above_start = psi_lam > lam
        residual = abs(psi_lam - lam)
        if (
            last_step is not None
            and last_step <= tol * max(lam, 1e-300)
            and residual <= tol * max(lam, 1e-300)
        ):
            converged = True
            break
        nxt = (1.0 - alpha) * psi_lam + alpha * lam
        last_step = abs(nxt - lam)
        lam = nxt
        trace.append(lam)
    try:
        beta_star, gamma_star = solve_attempt_rate(model, lam, beta_init=beta)
    except OverloadError:
        beta_star = gamma_star = float("nan")
    return FixedPointResult(
        lambda_star=lam,
        beta_star=beta_star,
        gamma_star=gamma_star,
        iterations=len(trace) - 1,
        converged=converged,
        trace=tuple(trace),
        psi_above_start=psi_above_start,
    )


# ---------------------------------------------------------------------------
# Beta-space map shape verification. Substituting the collision and service
# equations into the attempt-rate equation closes a map f over beta alone:
# f(beta) = (sigma + gamma(beta)*(sigma + c*t_s)) / S(gamma(beta)).
# The scan checks the claimed monotone decrease and concavity by central
# finite differences; violations are reported, never silently dropped. The
# default grid spans [0, 1/b0], the model's attainable attempt-rate range
# (a station cannot attempt more than once per minimum mean window).
# ---------------------------------------------------------------------------


def f_beta(model: WlanModel, beta: float) -> float:
    """The closed beta-space map whose fixed point pins the operating point."""
    if not 0.0 <= beta <= 1.0:
        raise ModelDomainError(f"beta must be in [0, 1], got {beta}")
    gamma = _gamma(beta, model.n)
    a = model.sigma_us + model.c * model.t_s_us
    return (model.sigma_us + gamma * a) / _service_time(model, gamma)


def f_beta_prime(model: WlanModel, beta: float) -> float:
    """Analytic first derivative of f_beta (chain rule through gamma)."""
    n = model.n
    gamma = _gamma(beta, n)
    gamma_prime = (n - 1) * (1.0 - beta) ** (n - 2)
    a = model.sigma_us + model.c * model.t_s_us  # d(numerator)/d(gamma)
    g_lin = model.sigma_us + model.c * model.t_s_us * gamma
    poly = 0.0
    dpoly = 0.0
    for b_i in reversed(model.b):
        dpoly = dpoly * gamma + poly
        poly = poly * gamma + b_i
    s = poly * g_lin
    ds = dpoly * g_lin + poly * model.c * model.t_s_us
    num = model.sigma_us + gamma * a
    return gamma_prime * (a * s - num * ds) / (s * s)


@dataclass(frozen=True)
class ShapeReport:
    grid_size: int
    beta_hi: float
    fprime_violations: tuple[float, ...]
    fsecond_violations: tuple[float, ...]
    label: str = ""
    passed: bool = field(init=False)

    def __post_init__(self):
        object.__setattr__(
            self, "passed", not self.fprime_violations and not self.fsecond_violations
        )


def verify_shape(
    model: WlanModel, grid_size: int = 1000, beta_hi: float | None = None, label: str = ""
) -> ShapeReport:
    """Scan f_beta on a uniform grid; list every beta where f' >= 0 or f'' >= 0."""
    if grid_size < 100:
        raise ModelDomainError(f"grid_size must be >= 100, got {grid_size}")
    if beta_hi is None:
        beta_hi = 1.0 / model.b[0]
    h = beta_hi / grid_size
    vals = [f_beta(model, j * h) for j in range(grid_size + 1)]
    bad_first = []
    bad_second = []
    for j in range(1, grid_size):
        d1 = (vals[j + 1] - vals[j - 1]) / (2.0 * h)
        d2 = vals[j + 1] - 2.0 * vals[j] + vals[j - 1]  # sign of f'' * h^2
        if d1 >= 0.0:
            bad_first.append(j * h)
        if d2 >= 0.0:
            bad_second.append(j * h)
    return ShapeReport(
        grid_size=grid_size,
        beta_hi=beta_hi,
        fprime_violations=tuple(bad_first),
        fsecond_violations=tuple(bad_second),
        label=label,
    )
