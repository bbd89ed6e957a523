"""Declarative experiment configuration (JSON, strict schema).

Unknown keys are rejected and every validation failure is reported with a
dotted field path such as ``protocol.hyper.eta``.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .federation import PROTOCOLS

PROTOCOL_KINDS = PROTOCOLS + ("blockfl", "extfl")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class ModelConfig(_Strict):
    # full widths (input, hidden..., labels); derived from the data when omitted
    layer_widths: Optional[list[int]] = None
    hidden: list[int] = Field(default_factory=lambda: [32])
    activation: Literal["relu", "sigmoid"] = "relu"

    @model_validator(mode="after")
    def _widths(self):
        if self.layer_widths is not None:
            if len(self.layer_widths) < 2 or any(w < 1 for w in self.layer_widths):
                raise ValueError("layer_widths needs >= 2 positive entries")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be positive")
        return self


class BlobsConfig(_Strict):
    label_count: int = Field(10, ge=2)
    per_class: int = Field(60, ge=1)
    dim: int = Field(8, ge=1)
    separation: float = Field(4.0, gt=0)
    test_per_class: int = Field(20, ge=1)


class PartitionConfig(_Strict):
    mode: Literal["iid", "label_skew"] = "iid"
    labels_per_device: int = Field(1, ge=1)


class DataConfig(_Strict):
    source: Literal["blobs", "csv"] = "blobs"
    blobs: BlobsConfig = Field(default_factory=BlobsConfig)
    csv_path: Optional[str] = None
    csv_label_count: Optional[int] = Field(None, ge=2)
    test_fraction: float = Field(0.25, gt=0, lt=1)
    n_devices: int = Field(10, ge=1)
    partition: PartitionConfig = Field(default_factory=PartitionConfig)
    p_share: float = Field(0.0, ge=0, le=1)

    @model_validator(mode="after")
    def _csv(self):
        if self.source == "csv" and not self.csv_path:
            raise ValueError("source 'csv' needs csv_path")
        return self


class HyperConfig(_Strict):
    eta: float = Field(0.1, gt=0)
    tau: Optional[int] = Field(1, ge=1)
    alpha: float = Field(0.1, ge=0, lt=1)
    beta: float = Field(0.9, gt=0, le=1)
    rho: float = Field(1.0, gt=0)
    T: float = Field(1.0, gt=0)
    reg_kind: Literal["mse", "cross_entropy"] = "mse"
    reg_weight: float = Field(1.0, ge=0)
    reg_every_step: bool = True
    batch_size: Optional[int] = Field(None, ge=1)
    lr_decay: Optional[float] = Field(100.0, gt=0)
    fd_accumulator: Literal["running_mean", "weighted", "checkpoint"] = "running_mean"
    inner_tol: float = Field(1e-8, gt=0)
    inner_max_iter: int = Field(500, ge=1)


class ProtocolConfig(_Strict):
    kind: Literal[PROTOCOL_KINDS]  # type: ignore[valid-type]
    hyper: HyperConfig = Field(default_factory=HyperConfig)
    mixing: Union[Literal["identity", "complete", "ring", "chain"], list[list[float]]] = "complete"


class LinkConfig(_Strict):
    uplink_bps: float = Field(1e6, gt=0)
    downlink_bps: float = Field(1e7, gt=0)
    prop_delay_s: float = Field(0.0, ge=0)
    capacity_bits_per_sample: float = Field(32.0, gt=0)
    loss_prob: float = Field(0.0, ge=0, lt=1)


class ComputeConfig(_Strict):
    per_epoch_s: float = Field(0.0, ge=0)
    straggle: Literal["none", "exponential", "uniform"] = "none"
    mean_s: float = Field(0.0, ge=0)
    lo: float = Field(0.0, ge=0)
    hi: float = Field(0.0, ge=0)
    aggregate_s: float = Field(0.0, ge=0)


class QuantizationConfig(_Strict):
    enabled: bool = False
    levels: Optional[int] = Field(None, ge=1)  # None: derive from link capacity
    downlink: bool = False


class DpConfigModel(_Strict):
    noise_sigma: float = Field(0.0, ge=0)
    clip_norm: Optional[float] = Field(None, gt=0)
    downlink: bool = False


class MalfunctionConfig(_Strict):
    prob: float = Field(0.5, ge=0, le=1)
    noise_mean: float = -0.1
    noise_var: float = Field(0.01, ge=0)


class BlockFlConfigModel(_Strict):
    n_miners: Optional[int] = Field(None, ge=1)  # None: one miner per device
    lambda_bgr: Optional[float] = Field(None, gt=0)  # None: closed-form optimum
    t_bp_s: float = Field(1.0, ge=0)
    t_wait_s: float = Field(0.0, ge=0)
    rollback_s: float = Field(2.0, ge=0)
    malfunction: Optional[MalfunctionConfig] = None

    @model_validator(mode="after")
    def _rate(self):
        if self.t_bp_s == 0 and self.lambda_bgr is None:
            raise ValueError("t_bp_s = 0 needs an explicit lambda_bgr")
        return self


class EvtConfig(_Strict):
    n_devices: int = Field(5, ge=1)
    arrival_rate: float = Field(0.3, ge=0, le=1)
    service_rate: float = Field(0.4, gt=0, le=1)
    horizon: int = Field(20000, ge=1)
    threshold: float = Field(4.0, ge=0)
    test_fraction: float = Field(0.5, gt=0, lt=1)
    lr: float = Field(0.5, gt=0)
    local_steps: int = Field(0, ge=0)
    init_sigma: float = Field(1.0, gt=0)
    init_xi: float = 0.1


class ExperimentConfig(_Strict):
    protocol: ProtocolConfig
    rounds: int = Field(ge=0)
    model: ModelConfig = Field(default_factory=ModelConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    links: LinkConfig = Field(default_factory=LinkConfig)
    compute: ComputeConfig = Field(default_factory=ComputeConfig)
    quantization: QuantizationConfig = Field(default_factory=QuantizationConfig)
    dp: DpConfigModel = Field(default_factory=DpConfigModel)
    blockfl: Optional[BlockFlConfigModel] = None
    evt: Optional[EvtConfig] = None
    target_loss: Optional[float] = None
    seed: int = Field(0, ge=0, lt=2**64)

    @model_validator(mode="after")
    def _sections(self):
        kind = self.protocol.kind
        if self.blockfl is not None and kind != "blockfl":
            raise ValueError("a blockfl section requires protocol.kind 'blockfl'")
        if self.evt is not None and kind != "extfl":
            raise ValueError("an evt section requires protocol.kind 'extfl'")
        return self


class ConfigError(ValueError):
    """Validation failure carrying ``(field_path, message)`` pairs."""

    def __init__(self, errors: list[tuple[str, str]]):
        self.errors = errors
        super().__init__("; ".join(f"{p}: {m}" for p, m in errors))


def _path(loc) -> str:
    parts = [str(p) for p in loc if not (isinstance(p, str) and "[" in p)]
    return ".".join(parts) or "<root>"


def validate_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError([(_path(e["loc"]), e["msg"]) for e in exc.errors()]) from None


def parse_config(path) -> ExperimentConfig:
    """Read and validate a JSON config file."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([("<file>", str(exc))]) from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([("<json>", str(exc))]) from None
    if not isinstance(data, dict):
        raise ConfigError([("<root>", "config must be a JSON object")])
    return validate_config(data)


def serialize_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True)


def with_value(cfg: ExperimentConfig, path: str, value) -> ExperimentConfig:
    """Copy of ``cfg`` with the numeric field at dotted ``path`` set to ``value``.

    Absent optional sections on the path are created with their defaults.
    """
    data = cfg.model_dump(mode="json")
    keys = path.split(".")
    model_cls = ExperimentConfig
    node = data
    for depth, key in enumerate(keys):
        fields = getattr(model_cls, "model_fields", None)
        if fields is None or key not in fields:
            raise ConfigError([(path, f"unknown field {'.'.join(keys[:depth + 1])!r}")])
        ann = fields[key].annotation
        sub = _submodel(ann)
        if depth == len(keys) - 1:
            if sub is not None or not _numeric(ann):
                raise ConfigError([(path, "not a numeric field")])
            node[key] = value
            break
        if sub is None:
            raise ConfigError([(path, f"{key!r} has no subfields")])
        if node.get(key) is None:
            node[key] = sub().model_dump(mode="json")
        node = node[key]
        model_cls = sub
    return validate_config(data)


def _args(ann):
    return getattr(ann, "__args__", ()) or ()


def _submodel(ann):
    if isinstance(ann, type) and issubclass(ann, BaseModel):
        return ann
    for a in _args(ann):
        if isinstance(a, type) and issubclass(a, BaseModel):
            return a
    return None


def _numeric(ann) -> bool:
    if ann in (int, float):
        return True
    return any(a in (int, float) for a in _args(ann))
