"""Model state information (MSI) messages exchanged between devices and helpers."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

KINDS = ("gradient", "weights", "logit_table", "jacobian_table", "gpd_gradient")
TABLE_KINDS = ("logit_table", "jacobian_table")
HELPER = -1


@dataclass
class MsiMessage:
    """One transmitted payload.

    ``origin`` is a device id or ``HELPER``. ``dest`` is ``None`` for an
    uplink to the helper, a helper broadcast, or a device broadcast to its
    neighbors; otherwise the receiving device. Table payloads carry a
    ``present`` mask over label rows and only present rows go on the air.
    """

    origin: int
    kind: str
    payload: np.ndarray
    element_bits: int = 32
    dest: int | None = None
    present: np.ndarray | None = None
    phase: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown MSI kind {self.kind!r}")
        self.payload = np.asarray(self.payload, dtype=np.float64)
        if self.kind in TABLE_KINDS:
            if self.present is None:
                self.present = np.ones(self.payload.shape[0], dtype=bool)
            self.present = np.asarray(self.present, dtype=bool)
            if self.present.shape != (self.payload.shape[0],):
                raise ValueError("present mask must have one entry per label row")
        elif self.present is not None:
            raise ValueError(f"{self.kind} messages carry no row mask")
        if self.element_bits < 1:
            raise ValueError("element_bits must be >= 1")

    @property
    def element_count(self) -> int:
        if self.kind in TABLE_KINDS:
            row = int(np.prod(self.payload.shape[1:]))
            return int(self.present.sum()) * row
        return int(self.payload.size)

    def live_values(self) -> np.ndarray:
        """The scalars actually transmitted, flattened."""
        if self.kind in TABLE_KINDS:
            return self.payload[self.present].ravel()
        return self.payload.ravel()

    def with_live_values(self, values, element_bits: int | None = None) -> "MsiMessage":
        values = np.asarray(values, dtype=np.float64)
        payload = self.payload.copy()
        if self.kind in TABLE_KINDS:
            payload[self.present] = values.reshape(payload[self.present].shape)
        else:
            payload = values.reshape(payload.shape)
        bits = self.element_bits if element_bits is None else element_bits
        return replace(self, payload=payload, element_bits=bits)
