"""Renyi-DP privacy ledger for the sub-sampled Gaussian mechanism.

Computes the order-alpha Renyi divergence of the Poisson-sub-sampled Gaussian
mechanism in the add/remove-one adjacency direction,
``D_alpha((1-q) N(0, s^2) + q N(1, s^2) || N(0, s^2))``,
composes mechanism events into a cumulative curve, converts the curve to
(epsilon, delta), and calibrates the fine-tuning noise scale against a target
budget. All evaluation happens in the log domain: curves routinely mix gamma
values across twenty orders of magnitude.

Integer orders use the exact binomial expansion of the divergence moment;
fractional orders use adaptive composite Gauss-Legendre quadrature over the
real line, refined by node doubling until successive estimates agree. Both
paths are cross-checked against each other and against an independent
high-precision oracle in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from .core import BudgetExhaustedError, InvalidArgumentError, NumericError

EVENT_KINDS = ("mean_query", "mode_query", "dpsgd_step")

SIGMA_SEARCH_RANGE = (1e-2, 1e3)
SIGMA_SEARCH_REL_TOL = 1e-4
QUADRATURE_ABS_TOL = 1e-12

# Above this log-moment peak the integrand is evaluated shifted by the peak;
# below it, the expm1 form preserves full relative precision of A - 1.
_SHIFT_CUT = 50.0


def default_orders() -> tuple[float, ...]:
    """Integer orders 2..64 plus a fractional grid {1.25, 1.5, 1.75, 2.5, ..., 127.5}."""
    orders = {1.25, 1.5, 1.75}
    orders.update(float(a) for a in range(2, 65))
    orders.update(2.5 + k for k in range(126))  # 2.5, 3.5, ..., 127.5
    return tuple(sorted(orders))


def _validate_sgm_args(q: float, sigma: float, alpha: float) -> None:
    if not (0.0 < q <= 1.0):
        raise InvalidArgumentError(f"sampling rate must be in (0, 1], got {q}")
    if sigma <= 0.0:
        raise InvalidArgumentError(f"noise scale must be positive, got {sigma}")
    if alpha <= 1.0:
        raise InvalidArgumentError(f"order must exceed 1, got {alpha}")


def _log1p_exp(x: float) -> float:
    """log(1 + exp(x)), stable for both signs of x."""
    if x <= 0.0:
        return math.log1p(math.exp(x))
    return x + math.log1p(math.exp(-x))


def _integer_log_moment_minus_one(q: float, sigma: float, alpha: int) -> float:
    """log(E_{x~p0}[(mix/p0)^alpha] - 1) via the exact binomial expansion.

    E[(mix/p0)^alpha] = sum_k C(alpha,k) (1-q)^(alpha-k) q^k
    exp((k^2 - k) / (2 sigma^2)); subtracting the plain binomial identity
    kills the k = 0, 1 terms and leaves a cancellation-free positive sum,
    so tiny divergences keep full relative precision.
    """
    ks = np.arange(2, alpha + 1, dtype=np.float64)
    exponents = (ks * ks - ks) / (2.0 * sigma * sigma)
    # log(expm1(y)): y for huge y, log(expm1(y)) otherwise
    log_expm1 = np.where(exponents > 690.0, exponents, np.log(np.expm1(np.minimum(exponents, 690.0))))
    log_terms = (
        gammaln(alpha + 1.0)
        - gammaln(ks + 1.0)
        - gammaln(alpha - ks + 1.0)
        + ks * math.log(q)
        + (alpha - ks) * math.log1p(-q)
        + log_expm1
    )
    return float(logsumexp(log_terms))


@lru_cache(maxsize=64)
def _gl_nodes(n: int) -> tuple[np.ndarray, np.ndarray]:
    return np.polynomial.legendre.leggauss(n)


def _log_mix_ratio(u: np.ndarray, q: float, sigma: float) -> np.ndarray:
    """log((1-q) + q * p1(x)/p0(x)) at standardized x = sigma * u."""
    shift = u / sigma - 1.0 / (2.0 * sigma * sigma)
    return np.logaddexp(math.log1p(-q), math.log(q) + shift)


def _fractional_log_moments(q: float, sigma: float, alphas: np.ndarray) -> np.ndarray:
    """log moments for an array of (fractional) orders by adaptive quadrature.

    A single standardized node set covers all orders: the integrand for order
    alpha has its mass inside [-14, alpha/sigma + 14]. Node density doubles
    until every order's estimate is stable to QUADRATURE_ABS_TOL (relative on
    the moment), which for this analytic integrand happens at the first check.
    """
    u_hi = float(np.max(alphas)) / sigma + 14.0
    u_lo = -14.0
    panels = max(64, int((u_hi - u_lo) * 2.0))
    nodes16, weights16 = _gl_nodes(16)

    prev: Optional[np.ndarray] = None
    for _ in range(8):
        edges = np.linspace(u_lo, u_hi, panels + 1)
        mid = 0.5 * (edges[:-1] + edges[1:])
        half = 0.5 * (edges[1:] - edges[:-1])
        u = (mid[:, None] + half[:, None] * nodes16[None, :]).reshape(-1)
        w = (half[:, None] * weights16[None, :]).reshape(-1)

        log_phi = -0.5 * u * u - 0.5 * math.log(2.0 * math.pi)
        logmix = _log_mix_ratio(u, q, sigma)

        log_a = np.empty(len(alphas), dtype=np.float64)
        for i, alpha in enumerate(alphas):
            ratio = alpha * logmix
            log_f = log_phi + ratio
            peak = float(np.max(log_f))
            if peak < _SHIFT_CUT:
                # exact-precision path for small divergences: integrate A - 1
                small = ratio <= 30.0
                term = np.where(
                    small,
                    np.exp(log_phi) * np.expm1(np.minimum(ratio, 30.0)),
                    np.exp(log_f) - np.exp(log_phi),
                )
                a_minus_1 = float(np.dot(w, term))
                log_a[i] = math.log1p(a_minus_1)
            else:
                integral = float(np.dot(w, np.exp(log_f - peak)))
                if integral <= 0.0:
                    raise NumericError(
                        f"quadrature produced a non-positive moment for q={q}, "
                        f"sigma={sigma}, alpha={alpha}"
                    )
                log_a[i] = peak + math.log(integral)

        if prev is not None:
            scale = np.maximum(1.0, np.abs(log_a))
            if np.all(np.abs(log_a - prev) <= QUADRATURE_ABS_TOL * scale):
                return log_a
        prev = log_a
        panels *= 2
    raise NumericError(
        f"quadrature failed to converge for q={q}, sigma={sigma} "
        f"(final panel count {panels // 2}, orders {alphas.tolist()})"
    )


def _sgm_rdp_integer(q: float, sigma: float, alpha: int) -> float:
    log_am1 = _integer_log_moment_minus_one(q, sigma, alpha)
    return _log1p_exp(log_am1) / (alpha - 1.0)


def _sgm_rdp_quadrature(q: float, sigma: float, alpha: float) -> float:
    log_a = _fractional_log_moments(q, sigma, np.array([alpha], dtype=np.float64))[0]
    return max(0.0, log_a / (alpha - 1.0))


@lru_cache(maxsize=100_000)
def sgm_rdp(q: float, sigma: float, alpha: float) -> float:
    """RDP cost gamma (nats) of one sub-sampled Gaussian release.

    q = 1 reduces to the analytic Gaussian divergence alpha / (2 sigma^2).
    Integer orders take the closed-form binomial path, fractional orders the
    adaptive quadrature path.
    """
    q, sigma, alpha = float(q), float(sigma), float(alpha)
    _validate_sgm_args(q, sigma, alpha)
    if q == 1.0:
        return alpha / (2.0 * sigma * sigma)
    if alpha.is_integer():
        return _sgm_rdp_integer(q, sigma, int(alpha))
    return _sgm_rdp_quadrature(q, sigma, alpha)


@lru_cache(maxsize=4096)
def sgm_rdp_curve(q: float, sigma: float, orders: tuple[float, ...]) -> tuple[float, ...]:
    """gamma(alpha) over a full order grid; the workhorse behind compose().

    Fractional orders are evaluated in one vectorized quadrature pass, which
    keeps repeated calibration calls cheap.
    """
    q, sigma = float(q), float(sigma)
    for a in orders:
        _validate_sgm_args(q, sigma, a)
    gammas = np.empty(len(orders), dtype=np.float64)
    if q == 1.0:
        gammas[:] = [a / (2.0 * sigma * sigma) for a in orders]
        return tuple(gammas)
    frac_ix = [i for i, a in enumerate(orders) if not float(a).is_integer()]
    for i, a in enumerate(orders):
        if float(a).is_integer():
            gammas[i] = _sgm_rdp_integer(q, sigma, int(a))
    if frac_ix:
        alphas = np.array([orders[i] for i in frac_ix], dtype=np.float64)
        log_a = _fractional_log_moments(q, sigma, alphas)
        for j, i in enumerate(frac_ix):
            gammas[i] = max(0.0, log_a[j] / (orders[i] - 1.0))
    return tuple(gammas)


@dataclass(frozen=True)
class RdpCurve:
    """Cumulative RDP ledger: gamma(alpha) over a fixed grid of orders."""

    orders: tuple[float, ...]
    gammas: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.orders) != len(self.gammas):
            raise InvalidArgumentError("orders and gammas must have equal length")
        prev = 1.0
        for a in self.orders:
            if a <= prev:
                raise InvalidArgumentError("orders must be strictly increasing and > 1")
            prev = a
        for g in self.gammas:
            if not (g >= 0.0 and math.isfinite(g)):
                raise InvalidArgumentError(f"gamma values must be finite and non-negative, got {g}")

    @classmethod
    def zero(cls, orders: Sequence[float]) -> "RdpCurve":
        return cls(tuple(orders), tuple(0.0 for _ in orders))

    def scaled(self, k: float) -> "RdpCurve":
        return RdpCurve(self.orders, tuple(k * g for g in self.gammas))

    def __add__(self, other: "RdpCurve") -> "RdpCurve":
        if self.orders != other.orders:
            raise InvalidArgumentError("cannot add curves over different order grids")
        return RdpCurve(self.orders, tuple(a + b for a, b in zip(self.gammas, other.gammas)))


@dataclass(frozen=True)
class MechanismEvent:
    """One charged mechanism: kind, sampling rate, noise scale, repetitions.

    `partition` optionally names the disjoint data subset the mechanism ran
    on; events on distinct partitions compose in parallel (max) rather than
    sequentially (sum).
    """

    kind: str
    q: float
    sigma: float
    repetitions: int = 1
    partition: Optional[str] = None

    def __post_init__(self) -> None:
        if self.kind not in EVENT_KINDS:
            raise InvalidArgumentError(f"unknown mechanism kind {self.kind!r}")
        if not (0.0 < self.q <= 1.0):
            raise InvalidArgumentError(f"sampling rate must be in (0, 1], got {self.q}")
        if self.sigma <= 0.0:
            raise InvalidArgumentError(f"noise scale must be positive, got {self.sigma}")
        if self.repetitions < 1:
            raise InvalidArgumentError("repetitions must be >= 1")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "q": self.q,
            "sigma": self.sigma,
            "repetitions": self.repetitions,
            "partition": self.partition,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MechanismEvent":
        return cls(
            kind=d["kind"],
            q=float(d["q"]),
            sigma=float(d["sigma"]),
            repetitions=int(d.get("repetitions", 1)),
            partition=d.get("partition"),
        )


def compose(events: Sequence[MechanismEvent], orders: Sequence[float] | None = None) -> RdpCurve:
    """Cumulative RDP curve of a list of mechanism events.

    Unpartitioned events add linearly (sequential composition, repetitions
    multiply). Events carrying a partition label are grouped by label, summed
    within a label, and contribute the maximum across labels (parallel
    composition over disjoint subsets). An empty event list yields the zero
    curve.
    """
    orders = tuple(orders) if orders is not None else default_orders()
    total = np.zeros(len(orders), dtype=np.float64)
    partitioned: dict[str, np.ndarray] = {}
    for ev in events:
        curve = ev.repetitions * np.array(sgm_rdp_curve(ev.q, ev.sigma, orders))
        if ev.partition is None:
            total += curve
        elif ev.partition in partitioned:
            partitioned[ev.partition] += curve
        else:
            partitioned[ev.partition] = curve
    if partitioned:
        total += np.max(np.stack(list(partitioned.values())), axis=0)
    return RdpCurve(orders, tuple(float(g) for g in total))


def rdp_to_dp(curve: RdpCurve, delta: float) -> tuple[float, float]:
    """Tightest (epsilon, minimizing order) conversion of an RDP curve.

    epsilon = min over stored orders of gamma(alpha) + log(1/delta)/(alpha-1).
    """
    if not (0.0 < delta < 1.0):
        raise InvalidArgumentError(f"delta must be in (0, 1), got {delta}")
    if not curve.orders:
        raise InvalidArgumentError("cannot convert an empty curve")
    log_inv_delta = math.log(1.0 / delta)
    best_eps = math.inf
    best_alpha = curve.orders[0]
    for a, g in zip(curve.orders, curve.gammas):
        eps = g + log_inv_delta / (a - 1.0)
        if eps < best_eps:
            best_eps = eps
            best_alpha = a
    return best_eps, best_alpha


@dataclass
class PrivacySpec:
    """Privacy target plus the running ledger of charged mechanisms."""

    target_epsilon: float
    delta: float
    events: list[MechanismEvent] = field(default_factory=list)
    sigma_f: Optional[float] = None
    orders: tuple[float, ...] = field(default_factory=default_orders)

    def __post_init__(self) -> None:
        if self.target_epsilon <= 0.0:
            raise InvalidArgumentError("target epsilon must be positive")
        if not (0.0 < self.delta < 1.0):
            raise InvalidArgumentError(f"delta must be in (0, 1), got {self.delta}")

    def record(self, *events: MechanismEvent) -> None:
        self.events.extend(events)

    def curve(self) -> RdpCurve:
        return compose(self.events, self.orders)

    def epsilon(self) -> tuple[float, float]:
        return rdp_to_dp(self.curve(), self.delta)

    def assert_within_budget(self) -> float:
        eps, _ = self.epsilon()
        if eps > self.target_epsilon * (1.0 + 1e-9):
            raise BudgetExhaustedError(
                f"ledger epsilon {eps:.6g} exceeds target {self.target_epsilon:.6g}"
            )
        return eps

    def to_dict(self) -> dict:
        return {
            "target_epsilon": self.target_epsilon,
            "delta": self.delta,
            "sigma_f": self.sigma_f,
            "events": [ev.to_dict() for ev in self.events],
        }


def calibrate_sigma_f(
    query_events: Sequence[MechanismEvent],
    steps: int,
    sampling_rate: float,
    target_epsilon: float,
    delta: float,
    orders: Sequence[float] | None = None,
    sigma_range: tuple[float, float] = SIGMA_SEARCH_RANGE,
    rel_tol: float = SIGMA_SEARCH_REL_TOL,
) -> float:
    """Smallest fine-tuning noise scale keeping the total budget under target.

    The query-stage events are fixed; the fine-tuning stage contributes
    `steps` sub-sampled Gaussian releases at `sampling_rate`. Binary search
    over the noise scale returns, within `rel_tol` relative width, the
    smallest scale whose composed epsilon does not exceed the target.
    Interior solutions land in [0.999 * target, target]; if even the lower
    search bound satisfies the budget (e.g. zero steps) the bound itself is
    returned.
    """
    if steps < 0:
        raise InvalidArgumentError("steps must be non-negative")
    orders = tuple(orders) if orders is not None else default_orders()
    sigma_lo, sigma_hi = sigma_range

    warm_curve = compose(query_events, orders)
    eps_w, _ = rdp_to_dp(warm_curve, delta)
    if eps_w >= target_epsilon:
        raise BudgetExhaustedError(
            f"query stage alone costs epsilon {eps_w:.6g} >= target {target_epsilon:.6g}"
        )
    if steps == 0:
        return sigma_lo

    warm_gammas = np.array(warm_curve.gammas)
    log_inv_delta = math.log(1.0 / delta)
    conv = np.array([log_inv_delta / (a - 1.0) for a in orders])

    def total_epsilon(sigma: float) -> float:
        fine = steps * np.array(sgm_rdp_curve(sampling_rate, sigma, orders))
        return float(np.min(warm_gammas + fine + conv))

    if total_epsilon(sigma_hi) > target_epsilon:
        raise BudgetExhaustedError(
            f"even noise scale {sigma_hi} leaves epsilon above target {target_epsilon:.6g} "
            f"for {steps} steps at rate {sampling_rate}"
        )

    # Cheap pre-bracketing on the integer sub-grid (closed form only). The
    # full-grid epsilon is a min over a superset of orders, so it never
    # exceeds the integer-grid epsilon: the integer solution is a feasible
    # upper bracket, and probing small sigmas (where the fractional
    # quadrature gets expensive) is avoided entirely.
    int_orders = tuple(a for a in orders if float(a).is_integer()) or orders
    warm_int = compose(query_events, int_orders)
    warm_int_g = np.array(warm_int.gammas)
    conv_int = np.array([log_inv_delta / (a - 1.0) for a in int_orders])

    def int_epsilon(sigma: float) -> float:
        fine = steps * np.array(sgm_rdp_curve(sampling_rate, sigma, int_orders))
        return float(np.min(warm_int_g + fine + conv_int))

    lo, hi = sigma_lo, sigma_hi
    for _ in range(80):
        if hi / lo - 1.0 <= rel_tol:
            break
        mid = math.sqrt(lo * hi)
        if int_epsilon(mid) <= target_epsilon:
            hi = mid
        else:
            lo = mid

    # Descend to the full-grid solution, which can only sit at or below `hi`.
    lo = hi
    for _ in range(200):
        cand = max(sigma_lo, lo / 1.1)
        if total_epsilon(cand) > target_epsilon:
            lo = cand
            break
        hi = cand
        lo = cand
        if cand == sigma_lo:
            return sigma_lo

    for _ in range(200):
        if hi / lo - 1.0 <= rel_tol and total_epsilon(hi) >= 0.999 * target_epsilon:
            break
        mid = math.sqrt(lo * hi)
        if total_epsilon(mid) <= target_epsilon:
            hi = mid
        else:
            lo = mid
    eps_final = total_epsilon(hi)
    if not (0.999 * target_epsilon <= eps_final <= target_epsilon):
        raise NumericError(
            f"calibration failed to land in the target window: epsilon {eps_final:.9g} "
            f"vs target {target_epsilon:.9g} at sigma {hi:.9g}"
        )
    return hi


def resolve_privacy_spec(spec: PrivacySpec, steps: int, sampling_rate: float) -> PrivacySpec:
    """Calibrated copy of `spec` with sigma_f filled in for the fine-tune stage."""
    sigma = calibrate_sigma_f(
        spec.events,
        steps,
        sampling_rate,
        spec.target_epsilon,
        spec.delta,
        orders=spec.orders,
    )
    return replace(spec, sigma_f=sigma, events=list(spec.events))
