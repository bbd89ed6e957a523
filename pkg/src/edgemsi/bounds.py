"""Generalization-error bound calculators (natural logarithms throughout)."""

from __future__ import annotations

import math

import numpy as np


def _check_n(n):
    if not n >= 1:
        raise ValueError("n must be >= 1")


def _check_eps(eps, upper=1.0):
    if not 0.0 < eps <= upper:
        raise ValueError(f"eps must lie in (0, {upper}]")


def ge_finite_h(hsize=None, n=1, eps=0.05, *, log_hsize=None) -> float:
    """``sqrt((ln|H| + ln(1/eps)) / (2n))`` for a finite hypothesis class.

    Pass ``log_hsize`` directly when ``|H|`` would overflow a float.
    """
    if (hsize is None) == (log_hsize is None):
        raise ValueError("give exactly one of hsize and log_hsize")
    if log_hsize is None:
        if not hsize >= 1:
            raise ValueError("hsize must be >= 1")
        log_hsize = math.log(hsize)
    elif log_hsize < 0:
        raise ValueError("log_hsize must be nonnegative")
    _check_n(n)
    _check_eps(eps)
    return math.sqrt((log_hsize + math.log(1.0 / eps)) / (2.0 * n))


def ge_pac_vc(vc, n, eps) -> float:
    """``sqrt((VC + ln(4/eps)) / n)``. ``eps`` may go up to 4 (log term zero)."""
    if not vc >= 1:
        raise ValueError("vc must be >= 1")
    _check_n(n)
    _check_eps(eps, upper=4.0)
    return math.sqrt((vc + math.log(4.0 / eps)) / n)


def ge_pac_bayes(kl, n, eps) -> float:
    """McAllester's ``sqrt((KL(q||p) + ln(1/eps)) / (2n))``."""
    if not kl >= 0:
        raise ValueError("kl must be nonnegative")
    _check_n(n)
    _check_eps(eps)
    return math.sqrt((kl + math.log(1.0 / eps)) / (2.0 * n))


def kl_diag_gaussians(mu_q, var_q, mu_p, var_p) -> float:
    """KL(q || p) between diagonal Gaussians."""
    mu_q, var_q, mu_p, var_p = (np.atleast_1d(np.asarray(a, dtype=np.float64)) for a in (mu_q, var_q, mu_p, var_p))
    if not (mu_q.shape == var_q.shape == mu_p.shape == var_p.shape):
        raise ValueError("all arguments must have the same shape")
    if np.any(var_q <= 0) or np.any(var_p <= 0):
        raise ValueError("variances must be positive")
    kl = 0.5 * np.sum(np.log(var_p / var_q) + (var_q + (mu_q - mu_p) ** 2) / var_p - 1.0)
    return max(float(kl), 0.0)


def bernoulli_kl(q: float, p: float) -> float:
    """KL between Bernoulli(q) and Bernoulli(p), losses taken in [0, 1]."""
    def term(a, b):
        if a == 0:
            return 0.0
        if b == 0:
            return math.inf
        return a * math.log(a / b)

    return term(q, p) + term(1.0 - q, 1.0 - p)


def seeger_holds(emp_loss: float, true_loss: float, kl: float, n: int, eps: float) -> bool:
    """Whether ``KL(emp || true) <= (KL(q||p) + ln((n+1)/eps)) / n`` for given losses."""
    _check_n(n)
    _check_eps(eps)
    if not (0.0 <= emp_loss <= 1.0 and 0.0 <= true_loss <= 1.0):
        raise ValueError("losses must lie in [0, 1]")
    return bernoulli_kl(emp_loss, true_loss) <= (kl + math.log((n + 1) / eps)) / n


def log_hypothesis_count(n_params: int, bits_per_weight: int = 32) -> float:
    """``ln|H|`` when each weight is restricted to a ``bits_per_weight`` grid."""
    return n_params * bits_per_weight * math.log(2.0)


def bound_table(n, eps, hsize=None, vc=None, kl=None, *, log_hsize=None) -> dict:
    """All bounds whose inputs are supplied, keyed by name."""
    row = {}
    if hsize is not None or log_hsize is not None:
        row["finite_h"] = ge_finite_h(hsize, n, eps, log_hsize=log_hsize)
    if vc is not None:
        row["pac_vc"] = ge_pac_vc(vc, n, eps)
    if kl is not None:
        row["pac_bayes"] = ge_pac_bayes(kl, n, eps)
    return row
