"""Pricing of protocol rounds: payload bits, link and compute delays, quantization.

Rounds are synchronous. In the helper-device split every device computes,
uploads over its own uplink, the helper aggregates and then transmits the
downlink messages one after another on a shared channel::

    total = max_i(compute_i + uplink_i) + prop + aggregate + downlink + prop

In the device-device split each transmission phase lasts as long as its
slowest broadcaster::

    total = max_i(compute_i) + sum_phase(max_origin(tx) + prop)

Lost transmissions are repeated whole; the attempt count is geometric.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .msi import MsiMessage

HALF_LOG2_12 = 0.5 * math.log2(12.0)


@dataclass(frozen=True)
class LinkModel:
    uplink_bps: float = 1e6
    downlink_bps: float = 1e7
    prop_delay_s: float = 0.0
    capacity_bits_per_sample: float = 32.0
    loss_prob: float = 0.0

    def __post_init__(self):
        if not (self.uplink_bps > 0 and self.downlink_bps > 0):
            raise ValueError("link rates must be positive")
        if self.prop_delay_s < 0:
            raise ValueError("prop_delay_s must be nonnegative")
        if not self.capacity_bits_per_sample > 0:
            raise ValueError("capacity_bits_per_sample must be positive")
        if not 0.0 <= self.loss_prob < 1.0:
            raise ValueError("loss_prob must lie in [0, 1)")


@dataclass(frozen=True)
class ComputeModel:
    per_epoch_s: float = 0.0
    straggle: str = "none"
    mean_s: float = 0.0
    lo: float = 0.0
    hi: float = 0.0
    aggregate_s: float = 0.0

    def __post_init__(self):
        if self.straggle not in ("none", "exponential", "uniform"):
            raise ValueError("straggle must be none, exponential or uniform")
        if min(self.per_epoch_s, self.mean_s, self.lo, self.hi, self.aggregate_s) < 0:
            raise ValueError("compute times must be nonnegative")
        if self.hi < self.lo:
            raise ValueError("uniform straggle needs lo <= hi")

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        base = np.full(n, float(self.per_epoch_s))
        if self.straggle == "exponential" and self.mean_s > 0:
            base = base + rng.exponential(self.mean_s, size=n)
        elif self.straggle == "uniform":
            base = base + rng.uniform(self.lo, self.hi, size=n)
        return base


@dataclass
class RoundTiming:
    compute_s: np.ndarray
    uplink_s: np.ndarray
    propagation_s: float
    aggregate_s: float
    downlink_s: float
    total_s: float


def payload_bits(msg: MsiMessage) -> int:
    """Bits on the air: transmitted scalars times bits per scalar.

    Tables only count present label rows; a GPD update carries scale, shape,
    their two gradient entries and the sample count.
    """
    return int(msg.element_count) * int(msg.element_bits)


def max_quantization_levels(capacity_bits: float) -> int:
    """Largest level count with ``log2(levels) + log2(12)/2 <= capacity``."""
    if capacity_bits <= HALF_LOG2_12:
        warnings.warn(f"capacity {capacity_bits} bits/sample admits only one level")
        return 1
    return max(1, int(math.floor(2.0 ** (capacity_bits - HALF_LOG2_12) + 1e-9)))


def quantize_uniform(values, levels: int):
    """Snap each value to the midpoint of its cell among ``levels`` equal cells.

    Returns ``(quantized, step)`` with ``step = (max - min) / levels``; a
    constant input is returned unchanged with step 0.
    """
    if levels < 1 or int(levels) != levels:
        raise ValueError("levels must be a positive integer")
    x = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot quantize non-finite values")
    if x.size == 0:
        return x.copy(), 0.0
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        return x.copy(), 0.0
    step = (hi - lo) / levels
    cell = np.minimum(np.floor((x - lo) / step), levels - 1)
    return lo + (cell + 0.5) * step, step


def quantized_element_bits(levels: int) -> int:
    return max(1, math.ceil(math.log2(levels))) if levels > 1 else 1


def quantize_message(msg: MsiMessage, levels: int) -> MsiMessage:
    q, _ = quantize_uniform(msg.live_values(), levels)
    return msg.with_live_values(q, element_bits=quantized_element_bits(levels))


def _attempts(loss_prob: float, rng: np.random.Generator) -> int:
    if loss_prob <= 0:
        return 1
    return int(rng.geometric(1.0 - loss_prob))


def price_round(
    uplink,
    downlink,
    n_devices: int,
    links: LinkModel,
    compute: ComputeModel,
    rng: np.random.Generator,
    split: str = "hd",
) -> RoundTiming:
    """Simulated wall time of one synchronous round.

    ``uplink`` holds the device-sent messages (including device-to-device
    broadcasts), ``downlink`` the helper-sent ones. Jitter and retries are
    drawn from ``rng`` in a fixed order: compute, then uplink messages, then
    downlink messages.
    """
    if split not in ("hd", "dd"):
        raise ValueError("split must be 'hd' or 'dd'")
    compute_s = compute.sample(n_devices, rng)
    up_tx = np.zeros(n_devices)
    phase_tx: dict[int, np.ndarray] = {}
    for msg in uplink:
        t = _attempts(links.loss_prob, rng) * payload_bits(msg) / links.uplink_bps
        up_tx[msg.origin] += t
        phase_tx.setdefault(msg.phase, np.zeros(n_devices))[msg.origin] += t
    down_s = 0.0
    for msg in downlink:
        down_s += _attempts(links.loss_prob, rng) * payload_bits(msg) / links.downlink_bps

    prop = 0.0
    aggregate = 0.0
    if split == "hd":
        barrier = float(np.max(compute_s + up_tx)) if n_devices else 0.0
        if uplink:
            prop += links.prop_delay_s
            aggregate = compute.aggregate_s
        if downlink:
            prop += links.prop_delay_s
        total = barrier + aggregate + down_s + prop
    else:
        total = float(np.max(compute_s)) if n_devices else 0.0
        for phase in sorted(phase_tx):
            total += float(np.max(phase_tx[phase])) + links.prop_delay_s
            prop += links.prop_delay_s
    return RoundTiming(compute_s, up_tx, prop, aggregate, down_s, total)


def element_bits_for_capacity(capacity_bits: float) -> int:
    return quantized_element_bits(max_quantization_levels(capacity_bits))

