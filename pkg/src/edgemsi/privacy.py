"""Gaussian noise for MSI payloads and label-based privacy leakage ratios."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .msi import MsiMessage


@dataclass(frozen=True)
class DpConfig:
    noise_sigma: float = 0.0
    clip_norm: float | None = None

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")

    @property
    def active(self) -> bool:
        return self.noise_sigma > 0 or self.clip_norm is not None


def gaussian_mechanism(msg: MsiMessage, cfg: DpConfig, rng: np.random.Generator) -> MsiMessage:
    """Clip the transmitted values to ``clip_norm`` in L2, then add N(0, sigma^2).

    Kind, shape and row mask are preserved; absent table rows stay untouched.
    """
    if not cfg.active:
        return msg
    values = msg.live_values()
    if cfg.clip_norm is not None:
        norm = float(np.linalg.norm(values))
        if norm > cfg.clip_norm:
            values = values * (cfg.clip_norm / norm)
    if cfg.noise_sigma > 0:
        values = values + rng.normal(0.0, cfg.noise_sigma, size=values.shape)
    return msg.with_live_values(values)


@dataclass
class LabelSets:
    target: set[int] = field(default_factory=set)
    redundant: set[int] = field(default_factory=set)

    def __post_init__(self):
        self.target = set(int(t) for t in self.target)
        self.redundant = set(int(r) for r in self.redundant)
        if self.target & self.redundant:
            raise ValueError("target and redundant labels must be disjoint")

    @property
    def uploaded(self) -> set[int]:
        return self.target | self.redundant


def device_helper_pl(sets: LabelSets) -> float:
    """Share of a device's uploaded labels that are target labels."""
    denom = len(sets.target) + len(sets.redundant)
    if denom == 0:
        raise ValueError("device uploads no labels")
    return len(sets.target) / denom


def inter_device_pl(all_sets, i: int) -> float:
    """Device ``i``'s target-label count over the union of all uploaded labels."""
    union = set()
    for s in all_sets:
        union |= s.uploaded
    if not union:
        raise ValueError("no device uploads any label")
    return len(all_sets[i].target) / len(union)
