"""Tail modeling with generalized Pareto distributions.

Exceedances over a threshold are fitted by maximum likelihood, by an
entropic Wasserstein criterion, or federatedly by weighting device
gradients with their sample counts.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from ._random import derive_rng
from .msi import MsiMessage

SIGMA_FLOOR = 1e-8
_XI_SERIES = 1e-6


@dataclass(frozen=True)
class GpdParams:
    sigma: float
    xi: float

    def __post_init__(self):
        if not (self.sigma > 0 and math.isfinite(self.sigma) and math.isfinite(self.xi)):
            raise ValueError("GPD needs finite sigma > 0 and finite xi")

    def as_array(self) -> np.ndarray:
        return np.array([self.sigma, self.xi], dtype=np.float64)

    @classmethod
    def from_array(cls, d) -> "GpdParams":
        return cls(float(d[0]), float(d[1]))

    def upper_support(self) -> float:
        return -self.sigma / self.xi if self.xi < 0 else math.inf


@dataclass
class ExceedanceSet:
    threshold: float
    samples: np.ndarray
    owner: int = 0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).ravel()
        if np.any(~(self.samples > 0)):
            raise ValueError("exceedances must be strictly positive")

    def __len__(self):
        return int(self.samples.size)


def _as_params(p) -> GpdParams:
    return p if isinstance(p, GpdParams) else GpdParams.from_array(p)


def _log_survival(t, xi):
    """``log S`` at standardized points ``t = x/sigma``; -inf outside support."""
    t = np.asarray(t, dtype=np.float64)
    if abs(xi) < _XI_SERIES:
        return -t + 0.5 * xi * t * t
    z = 1.0 + xi * t
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(z > 0, -np.log1p(xi * t) / xi, -np.inf)
    return out


def gpd_cdf(x, p: GpdParams):
    """``1 - (1 + xi x / sigma)^(-1/xi)``; saturates to 1 beyond the upper end
    of the support (``xi < 0``) and to 0 below the origin."""
    p = _as_params(p)
    x = np.asarray(x, dtype=np.float64)
    t = np.maximum(x, 0.0) / p.sigma
    out = -np.expm1(_log_survival(t, p.xi))
    return out if out.ndim else float(out)


def gev_cdf(x, m: float, p: GpdParams):
    """``exp(G(x - m) - 1)`` with ``G`` the GPD form extended to negative
    arguments; ``xi = 0`` gives the Gumbel law."""
    p = _as_params(p)
    t = (np.asarray(x, dtype=np.float64) - m) / p.sigma
    if p.xi == 0.0:
        out = np.exp(-np.exp(-t))
    else:
        z = 1.0 + p.xi * t
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            surv = np.where(z > 0, np.power(np.where(z > 0, z, 1.0), -1.0 / p.xi), np.inf if p.xi > 0 else 0.0)
        out = np.exp(-surv)
    return out if out.ndim else float(out)


def _logpdf_and_grad(x, sigma, xi):
    t = x / sigma
    z = 1.0 + xi * t
    if np.any(z <= 0):
        return -np.inf, np.full(2, np.nan)
    if abs(xi) < _XI_SERIES:
        logpdf = -math.log(sigma) - t + 0.5 * xi * t * t - xi * t
        dxi = 0.5 * t * t - t + xi * (t * t - 2.0 * t ** 3 / 3.0)
    else:
        l1p = np.log1p(xi * t)
        logpdf = -math.log(sigma) - (1.0 / xi + 1.0) * l1p
        dxi = l1p / xi ** 2 - (1.0 / xi + 1.0) * t / z
    dsigma = -1.0 / sigma + (1.0 + xi) * t / (sigma * z)
    return float(np.mean(logpdf)), np.array([np.mean(dsigma), np.mean(dxi)])


def gpd_loglik_grad(samples, p: GpdParams):
    """Mean log-density of the samples and its gradient in ``(sigma, xi)``.

    Returns ``(-inf, nan-vector)`` when some sample is outside the support.
    """
    x = samples.samples if isinstance(samples, ExceedanceSet) else np.asarray(samples, dtype=np.float64)
    if x.size == 0:
        raise ValueError("no exceedances to evaluate")
    p = _as_params(p)
    return _logpdf_and_grad(x, p.sigma, p.xi)


def _project(d: np.ndarray) -> np.ndarray:
    return np.array([max(d[0], SIGMA_FLOOR), d[1]])


def gpd_ascent_step(samples, p: GpdParams, lr: float) -> GpdParams:
    """One projected ascent step ``d + lr * grad``."""
    _, g = gpd_loglik_grad(samples, p)
    return GpdParams.from_array(_project(p.as_array() + lr * g))


def fit_gpd_mle(samples, init: GpdParams, steps: int = 5000, lr: float = 0.5, tol: float = 1e-10, max_halvings: int = 60):
    """Projected gradient ascent on the mean log-likelihood.

    Steps that lower the likelihood or leave the support are halved; an
    accepted step lets the rate grow by 10%. Returns ``(params, grad_norm)``.
    An init whose support misses the samples is returned as is with a warning.
    """
    d = _as_params(init).as_array()
    ll, g = _logpdf_and_grad(_values(samples), *d)
    if not math.isfinite(ll):
        warnings.warn("log-likelihood is -inf at the initial parameters; returning init")
        return GpdParams.from_array(d), math.nan
    x = _values(samples)
    rate = lr
    for _ in range(steps):
        if np.linalg.norm(g) < tol:
            break
        for _ in range(max_halvings):
            cand = _project(d + rate * g)
            ll_c, g_c = _logpdf_and_grad(x, *cand)
            if math.isfinite(ll_c) and ll_c >= ll:
                break
            rate *= 0.5
        else:
            break
        if np.array_equal(cand, d):
            break
        d, ll, g = cand, ll_c, g_c
        rate *= 1.1
    return GpdParams.from_array(d), float(np.linalg.norm(g))


def _values(samples) -> np.ndarray:
    x = samples.samples if isinstance(samples, ExceedanceSet) else np.asarray(samples, dtype=np.float64)
    if x.size == 0:
        raise ValueError("no exceedances to fit")
    return x


def gpd_sample(p: GpdParams, n: int, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draws."""
    p = _as_params(p)
    u = rng.uniform(size=n)
    if abs(p.xi) < _XI_SERIES:
        return -p.sigma * np.log1p(-u)
    return p.sigma / p.xi * (np.power(1.0 - u, -p.xi) - 1.0)


# --- federated fitting --------------------------------------------------------


def gpd_message(origin: int, local: GpdParams, grad, count: int, element_bits: int = 32) -> MsiMessage:
    """Upload of ``(sigma, xi, dsigma, dxi, |S_u|)``."""
    payload = np.array([local.sigma, local.xi, grad[0], grad[1], float(count)])
    return MsiMessage(origin, "gpd_gradient", payload, element_bits=element_bits)


def federated_gpd_round(local_sets, global_params: GpdParams, lr: float, local_steps: int = 0, return_messages: bool = False):
    """One aggregation round.

    Each device with data refines the global parameters with ``local_steps``
    ascent steps to get ``d_u`` and evaluates its gradient at the current
    global parameters. With ``kappa_u = |S_u| / sum |S|`` the server returns
    ``sum kappa_u d_u + lr * sum kappa_u grad_u``. If that point leaves some
    device's support the global step is halved until it does not.
    """
    gp = _as_params(global_params)
    active = [s for s in local_sets if len(s) > 0]
    if not active:
        raise ValueError("all exceedance sets are empty")
    total = sum(len(s) for s in active)
    d_avg = np.zeros(2)
    g_avg = np.zeros(2)
    msgs = []
    for s in active:
        kappa = len(s) / total
        ll, g = gpd_loglik_grad(s, gp)
        if not math.isfinite(ll):
            raise ValueError(f"global parameters exclude samples of device {s.owner}")
        local = gp
        for _ in range(local_steps):
            local = gpd_ascent_step(s, local, lr)
        d_avg = d_avg + kappa * local.as_array()
        g_avg = g_avg + kappa * g
        msgs.append(gpd_message(s.owner, local, g, len(s)))
    step = lr
    for _ in range(60):
        new = _project(d_avg + step * g_avg)
        if all(math.isfinite(gpd_loglik_grad(s, new)[0]) for s in active):
            break
        step *= 0.5
    else:
        new = _project(d_avg)
    out = GpdParams.from_array(new)
    return (out, msgs) if return_messages else out


def fit_gpd_federated(local_sets, init: GpdParams, rounds: int = 2000, lr: float = 0.5, tol: float = 1e-12):
    """Iterate ``federated_gpd_round`` until the parameter change drops below ``tol``.

    Returns ``(params, rounds_used)``.
    """
    p = _as_params(init)
    for r in range(1, rounds + 1):
        new = federated_gpd_round(local_sets, p, lr)
        if np.max(np.abs(new.as_array() - p.as_array())) < tol:
            return new, r
        p = new
    return p, rounds


def extfl_exchange_elements(local_sets, rounds: int) -> int:
    """Scalars uploaded over ``rounds`` rounds: five per active device per round."""
    return 5 * rounds * sum(1 for s in local_sets if len(s) > 0)


def centralized_exchange_elements(local_sets) -> int:
    """Scalars uploaded when every device ships its raw exceedances once."""
    return sum(len(s) for s in local_sets)


# --- optimal transport ----------------------------------------------------------


def sinkhorn(a, b, cost, eps_reg: float, iters: int = 2000, tol: float = 1e-9, g0=None):
    """Entropic optimal transport between histograms ``a`` and ``b``.

    Runs alternating scaling iterations, switching to log-domain updates
    when the Gibbs kernel underflows. If the marginals are still off by more
    than ``tol`` the semi-dual is finished with L-BFGS, which handles small
    ``eps_reg`` far faster than further scaling sweeps. Returns
    ``(plan, (f, g), W)`` with dual potentials ``f, g`` and ``W = <plan, cost>``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    C = np.asarray(cost, dtype=np.float64)
    if C.shape != (a.size, b.size):
        raise ValueError("cost shape must be (len(a), len(b))")
    if not eps_reg > 0:
        raise ValueError("eps_reg must be positive")
    if np.any(a < 0) or np.any(b < 0) or abs(a.sum() - 1) > 1e-9 or abs(b.sum() - 1) > 1e-9:
        raise ValueError("a and b must be probability vectors")
    if np.any(C < 0):
        raise ValueError("cost must be nonnegative")

    rows, cols = a > 0, b > 0
    ar, bc, Cs = a[rows], b[cols], C[np.ix_(rows, cols)]
    g = None if g0 is None else np.asarray(g0, dtype=np.float64)[cols]
    g = _scaling_phase(ar, bc, Cs, eps_reg, iters, tol, g)
    f, g, err = _potentials(ar, bc, Cs, eps_reg, g)
    if err > tol:
        g = _semidual_lbfgs(ar, bc, Cs, eps_reg, g, tol, maxiter=max(20 * iters, 1000))
        f, g, err = _potentials(ar, bc, Cs, eps_reg, g)
    F = np.full(a.size, -np.inf)
    G = np.full(b.size, -np.inf)
    F[rows], G[cols] = f, g
    plan = np.zeros_like(C)
    plan[np.ix_(rows, cols)] = np.exp((f[:, None] + g[None, :] - Cs) / eps_reg)
    return plan, (F, G), float(np.sum(plan * C))


def _potentials(a, b, C, eps, g):
    """Row potential matching ``a`` exactly for a column potential ``g``, and
    the worst marginal error of the implied plan."""
    f = eps * (np.log(a) - logsumexp((g[None, :] - C) / eps, axis=1))
    cols = np.exp(logsumexp((f[:, None] + g[None, :] - C) / eps, axis=0))
    return f, g, float(np.max(np.abs(cols - b)))


def _scaling_phase(a, b, C, eps, iters, tol, g0):
    K = np.exp(-C / eps)
    if np.all(K.sum(axis=1) > 1e-200) and np.all(K.sum(axis=0) > 1e-200):
        v = np.ones_like(b)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            for it in range(iters):
                u = a / (K @ v)
                v_new = b / (K.T @ u)
                if not np.all(np.isfinite(v_new)):
                    break
                v = v_new
                if it % 25 == 0 and np.max(np.abs(u * (K @ v) - a)) < tol:
                    break
        if np.all(np.isfinite(v)) and np.all(v > 0):
            return eps * np.log(v)
    return _sinkhorn_log(a, b, C, eps, iters, tol, g0)


def _sinkhorn_log(a, b, C, eps, iters, tol, g0=None):
    """Log-domain iterations returning the column potential. Without a warm
    start eps is annealed down from the cost scale."""
    la, lb = np.log(a), np.log(b)
    g = np.zeros_like(b) if g0 is None else np.array(g0, dtype=np.float64)
    schedule = [eps]
    if g0 is None:
        e = float(C.max())
        while e > 4 * eps:
            schedule.insert(-1, e)
            e *= 0.5
    for k, e in enumerate(schedule):
        final = k == len(schedule) - 1
        for it in range(iters if final else 20):
            f = e * (la - logsumexp((g[None, :] - C) / e, axis=1))
            g = e * (lb - logsumexp((f[:, None] - C) / e, axis=0))
            if final and it % 10 == 0:
                row = np.exp(logsumexp((f[:, None] + g[None, :] - C) / e, axis=1))
                if np.max(np.abs(row - a)) < tol:
                    break
    return g


def _semidual_lbfgs(a, b, C, eps, g0, tol, maxiter=20000):
    la = np.log(a)

    def neg_dual(g):
        f = eps * (la - logsumexp((g[None, :] - C) / eps, axis=1))
        cols = np.exp(logsumexp((f[:, None] + g[None, :] - C) / eps, axis=0))
        return -(a @ f + b @ g), cols - b

    res = minimize(neg_dual, g0, jac=True, method="L-BFGS-B",
                   options=dict(maxiter=maxiter, gtol=0.1 * tol, ftol=0.0, maxcor=30))
    return res.x


def w1_exact_1d(x, y) -> float:
    """Exact W1 between two uniform-weight 1D samples via quantile functions."""
    x = np.sort(np.asarray(x, dtype=np.float64))
    y = np.sort(np.asarray(y, dtype=np.float64))
    grid = np.union1d(np.arange(1, x.size + 1) / x.size, np.arange(1, y.size + 1) / y.size)
    lo = np.concatenate([[0.0], grid[:-1]])
    mid = 0.5 * (lo + grid)
    qx = x[np.minimum(np.ceil(mid * x.size).astype(int) - 1, x.size - 1)]
    qy = y[np.minimum(np.ceil(mid * y.size).astype(int) - 1, y.size - 1)]
    return float(np.sum((grid - lo) * np.abs(qx - qy)))


def w1_to_sample(p: GpdParams, samples) -> float:
    """W1 between a GPD and an empirical sample: ``int |F - F_n| dx`` over [0, inf)."""
    p = _as_params(p)
    x = np.sort(_values(samples))
    top = x[-1]
    grid = np.linspace(0.0, top, 20001)
    Fn = np.searchsorted(x, grid, side="right") / x.size
    body = float(np.trapezoid(np.abs(gpd_cdf(grid, p) - Fn), grid))
    # beyond the largest sample F_n = 1, so the gap is the model survival mass
    if p.xi >= 1:
        return math.inf
    z = 1.0 + p.xi * top / p.sigma
    if abs(p.xi) < _XI_SERIES:
        tail = p.sigma * math.exp(-top / p.sigma)
    elif z <= 0:
        tail = 0.0
    else:
        tail = p.sigma / (1.0 - p.xi) * z ** (1.0 - 1.0 / p.xi)
    return body + tail


@dataclass(frozen=True)
class WassersteinGrid:
    bins: int = 256
    span: float = 1.5
    eps_scale: float = 0.01


def _cdf_and_grad(edges, sigma, xi):
    """GPD CDF at ``edges`` and its derivatives in (sigma, xi)."""
    t = edges / sigma
    ls = _log_survival(t, xi)
    S = np.exp(ls)
    z = 1.0 + xi * t
    with np.errstate(divide="ignore", invalid="ignore"):
        dls_ds = np.where(z > 0, (t / sigma) / np.where(z > 0, z, 1.0), 0.0)
        if abs(xi) < _XI_SERIES:
            dls_dx = 0.5 * t * t - (2.0 / 3.0) * xi * t ** 3
        else:
            zz = np.where(z > 0, z, 1.0)
            dls_dx = np.where(z > 0, np.log(zz) / xi ** 2 - t / (xi * zz), 0.0)
    F = 1.0 - S
    dF = np.stack([-S * dls_ds, -S * dls_dx])
    return F, dF


class _WassersteinObjective:
    def __init__(self, samples, grid: WassersteinGrid):
        x = _values(samples)
        self.edges = np.linspace(0.0, grid.span * float(x.max()), grid.bins + 1)
        self.centers = 0.5 * (self.edges[:-1] + self.edges[1:])
        counts, _ = np.histogram(x, bins=self.edges)
        self.a = counts / counts.sum()
        self.cost = np.abs(self.centers[:, None] - self.centers[None, :])
        self.eps = grid.eps_scale * float(self.cost.mean())
        self.tol = 1e-7
        self.g = None

    def histogram(self, d):
        F, dF = _cdf_and_grad(self.edges, d[0], d[1])
        mass = np.diff(F)
        dmass = np.diff(dF, axis=1)
        Z = mass.sum()
        b = np.maximum(mass / Z, 1e-300) if Z > 0 else np.full(mass.size, 1.0 / mass.size)
        return b / b.sum(), dmass, Z

    def value_grad(self, d):
        b, dmass, Z = self.histogram(d)
        _, (f, g), _ = sinkhorn(self.a, b, self.cost, self.eps, iters=10000, tol=self.tol, g0=self.g)
        self.g = g
        rows = self.a > 0
        # regularized transport cost, the quantity whose b-gradient is g
        value = float(self.a[rows] @ f[rows] + b @ g)
        gbar = float(b @ g)
        grad = dmass @ (g - gbar) / Z if Z > 0 else np.zeros(2)
        return value, grad


def fit_gpd_wasserstein(samples, init: GpdParams, grid: WassersteinGrid = WassersteinGrid(), steps: int = 200, tol: float = 1e-7):
    """Minimize the entropic transport cost between the binned sample and the
    binned GPD.

    The histogram gradient is the Sinkhorn dual potential of the model side,
    chained through the bin masses. Descent uses bounded L-BFGS with
    ``sigma >= 1e-8``; plain gradient steps crawl along the badly scaled
    ``xi`` direction. Returns ``(params, grad_norm)``.
    """
    obj = _WassersteinObjective(samples, grid)
    d0 = _project(_as_params(init).as_array())
    res = minimize(obj.value_grad, d0, jac=True, method="L-BFGS-B",
                   bounds=[(SIGMA_FLOOR, None), (None, None)],
                   options=dict(maxiter=steps, gtol=tol))
    d = _project(res.x)
    _, g = obj.value_grad(d)
    return GpdParams.from_array(d), float(np.linalg.norm(g))


def wasserstein_objective(samples, p: GpdParams, grid: WassersteinGrid = WassersteinGrid()):
    """Regularized transport cost of the binned fit and its gradient at ``p``."""
    return _WassersteinObjective(samples, grid).value_grad(_as_params(p).as_array())


# --- queue traces -----------------------------------------------------------------


def simulate_queues(M: int, arrival_rate: float, service_rate: float, horizon: int, seed: int) -> np.ndarray:
    """Slotted single-server queues, one row per device.

    Each slot a departure happens with probability ``service_rate`` if the
    queue is nonempty, then an arrival with probability ``arrival_rate``:
    ``Q_{t+1} = max(Q_t - D_t, 0) + A_t``. Returns an ``(M, horizon)`` integer array.
    """
    if not (0.0 <= arrival_rate <= 1.0 and 0.0 < service_rate <= 1.0):
        raise ValueError("rates must be probabilities and service_rate > 0")
    if arrival_rate >= service_rate:
        warnings.warn("arrival_rate >= service_rate: queues are unstable")
    rng = derive_rng(seed, "queues")
    A = rng.random((horizon, M)) < arrival_rate
    D = rng.random((horizon, M)) < service_rate
    out = np.zeros((M, horizon), dtype=np.int64)
    q = np.zeros(M, dtype=np.int64)
    for t in range(horizon):
        out[:, t] = q
        q = np.maximum(q - D[t], 0) + A[t]
    return out


def geo_geo_1_mean(arrival_rate: float, service_rate: float) -> float:
    """Stationary mean of the queue recursion used by ``simulate_queues``."""
    a, s = arrival_rate, service_rate
    if a == 0:
        return 0.0
    r = a * (1 - s) / (s * (1 - a))
    if r >= 1:
        return math.inf
    c = a / (s * (1 - a))
    pi0 = 1.0 / (1.0 + c / (1.0 - r))
    return pi0 * c / (1.0 - r) ** 2


def exceedances(trace, threshold: float, owner: int = 0) -> ExceedanceSet:
    q = np.asarray(trace, dtype=np.float64)
    return ExceedanceSet(threshold, q[q > threshold] - threshold, owner)


def save_exceedances(es: ExceedanceSet, path) -> None:
    np.savetxt(path, es.samples, fmt="%.17g")


def load_exceedances(path, threshold: float = 0.0, owner: int = 0) -> ExceedanceSet:
    return ExceedanceSet(threshold, np.atleast_1d(np.loadtxt(path, dtype=np.float64, ndmin=1)), owner)
