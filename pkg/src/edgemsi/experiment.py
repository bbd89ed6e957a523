"""Run orchestration: build data, model and devices from a config, drive a
protocol, price every round and record per-round metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Callable

import numpy as np

from . import blockfl as bfl
from . import datagen, evt, nn
from ._random import derive_rng
from .config import BlockFlConfigModel, EvtConfig, ExperimentConfig
from .federation import (
    DD_PROTOCOLS,
    Federation,
    HyperParams,
    MLPObjective,
    init_devices,
    mixing_matrix,
    run_rounds,
)
from .msi import HELPER, MsiMessage
from .netsim import ComputeModel, LinkModel, max_quantization_levels, payload_bits, price_round, quantize_message
from .privacy import DpConfig, gaussian_mechanism


@dataclass
class MetricsRecord:
    round: int
    sim_time_s: float
    cum_bits_up: int
    cum_bits_down: int
    train_loss: float
    test_loss: float
    test_acc: float | None
    forks: int | None
    protocol: str


CSV_COLUMNS = tuple(f.name for f in fields(MetricsRecord))


@dataclass
class Setup:
    train: datagen.Dataset
    test: datagen.Dataset
    plan: datagen.PartitionPlan
    spec: nn.ModelSpec
    devices: list
    fed: Federation
    links: LinkModel
    compute: ComputeModel

    def evaluate(self, devices) -> tuple[float, float, float]:
        """Mean over devices of pooled-train loss, test loss and test accuracy."""
        tr, te, acc = [], [], []
        for d in devices:
            tr.append(nn.loss(self.spec, d.params, self.train.inputs, self.train.labels))
            te.append(nn.loss(self.spec, d.params, self.test.inputs, self.test.labels))
            acc.append(nn.accuracy(self.spec, d.params, self.test.inputs, self.test.labels))
        return float(np.mean(tr)), float(np.mean(te)), float(np.mean(acc))


def link_model(cfg: ExperimentConfig) -> LinkModel:
    return LinkModel(**cfg.links.model_dump())


def compute_model(cfg: ExperimentConfig) -> ComputeModel:
    return ComputeModel(**cfg.compute.model_dump())


def hyper_params(cfg: ExperimentConfig) -> HyperParams:
    return HyperParams(**cfg.protocol.hyper.model_dump())


def build_data(cfg: ExperimentConfig):
    d = cfg.data
    if d.source == "blobs":
        b = d.blobs
        full = datagen.gen_blobs(b.label_count, b.per_class + b.test_per_class, b.dim, b.separation, derive_rng(cfg.seed, "data"))
        train, test = datagen.split_per_class(full, b.test_per_class, derive_rng(cfg.seed, "split"))
    else:
        full = datagen.load_csv(d.csv_path, d.csv_label_count)
        train, test = datagen.split_fraction(full, d.test_fraction, derive_rng(cfg.seed, "split"))
    if d.partition.mode == "iid":
        plan = datagen.partition_iid(train, d.n_devices, derive_rng(cfg.seed, "partition"))
    else:
        plan = datagen.partition_label_skew(train, d.n_devices, d.partition.labels_per_device, derive_rng(cfg.seed, "partition"))
    if d.p_share > 0:
        plan = datagen.share_fraction(train, plan, d.p_share, derive_rng(cfg.seed, "share"))
    return train, test, plan


def model_spec(cfg: ExperimentConfig, train: datagen.Dataset) -> nn.ModelSpec:
    widths = cfg.model.layer_widths
    if widths is None:
        widths = [train.dim] + list(cfg.model.hidden) + [train.label_count]
    elif widths[0] != train.dim or widths[-1] != train.label_count:
        raise ValueError(
            f"model.layer_widths must start with the input dim {train.dim} and end with the label count {train.label_count}"
        )
    return nn.ModelSpec(tuple(widths), cfg.model.activation)


def build_channels(cfg: ExperimentConfig):
    """Uplink and downlink hooks: quantize, then add noise at the transmitter.

    Quantization acts on the uplink unless ``quantization.downlink`` is set as
    well; noise likewise. ``None`` hooks leave messages untouched.
    """
    q = cfg.quantization
    levels = None
    if q.enabled:
        levels = q.levels if q.levels is not None else max_quantization_levels(cfg.links.capacity_bits_per_sample)
    dp = DpConfig(cfg.dp.noise_sigma, cfg.dp.clip_norm)
    dp_rng = derive_rng(cfg.seed, "dp")

    def make(quantize: bool, noisy: bool) -> Callable[[MsiMessage], MsiMessage] | None:
        if not quantize and not noisy:
            return None

        def hook(msg: MsiMessage) -> MsiMessage:
            if quantize:
                msg = quantize_message(msg, levels)
            if noisy:
                msg = gaussian_mechanism(msg, dp, dp_rng)
            return msg

        return hook

    up = make(levels is not None, dp.active)
    down = make(levels is not None and q.downlink, dp.active and cfg.dp.downlink)
    return up, down


def build_setup(cfg: ExperimentConfig) -> Setup:
    train, test, plan = build_data(cfg)
    spec = model_spec(cfg, train)
    kind = cfg.protocol.kind
    protocol = "favg" if kind == "blockfl" else kind
    params0 = spec.init_params(derive_rng(cfg.seed, "init"))
    devices = init_devices(protocol, params0, plan.assignments, spec.n_labels, spec.input_dim)
    objective = MLPObjective(spec, train.inputs, train.labels)
    mixing = None
    if protocol == "dsgd":
        m = cfg.protocol.mixing
        mixing = mixing_matrix(m, len(devices)) if isinstance(m, str) else np.asarray(m, dtype=np.float64)
    up, down = build_channels(cfg)
    fed = Federation(
        [objective] * len(devices),
        hyper_params(cfg),
        protocol,
        seed=cfg.seed,
        mixing=mixing,
        uplink=up,
        downlink=down,
    )
    return Setup(train, test, plan, spec, devices, fed, link_model(cfg), compute_model(cfg))


def run_experiment(cfg: ExperimentConfig) -> list[MetricsRecord]:
    kind = cfg.protocol.kind
    if kind == "extfl":
        return run_extfl(cfg)
    if cfg.rounds == 0:
        return []
    setup = build_setup(cfg)
    if kind == "blockfl":
        return _run_blockfl(cfg, setup)

    split = "dd" if kind in DD_PROTOCOLS else "hd"
    net_rng = derive_rng(cfg.seed, "netsim")
    records = []
    t = 0.0
    bits_up = bits_down = 0
    for k, out in enumerate(run_rounds(setup.devices, setup.fed, cfg.rounds), start=1):
        timing = price_round(out.uplink, out.downlink, len(out.devices), setup.links, setup.compute, net_rng, split)
        t += timing.total_s
        bits_up += sum(payload_bits(m) for m in out.uplink)
        bits_down += sum(payload_bits(m) for m in out.downlink)
        train_loss, test_loss, acc = setup.evaluate(out.devices)
        records.append(MetricsRecord(k, t, bits_up, bits_down, train_loss, test_loss, acc, None, kind))
    return records


def block_config(cfg: ExperimentConfig, n_devices: int) -> bfl.BlockFlConfig:
    b = cfg.blockfl if cfg.blockfl is not None else BlockFlConfigModel()
    mal = None if b.malfunction is None else bfl.Malfunction(**b.malfunction.model_dump())
    n = b.n_miners if b.n_miners is not None else n_devices
    if n != n_devices:
        raise ValueError("blockfl.n_miners must equal data.n_devices (one miner per device)")
    return bfl.BlockFlConfig(n, b.lambda_bgr, b.t_bp_s, b.t_wait_s, b.rollback_s, mal)


def _run_blockfl(cfg: ExperimentConfig, setup: Setup) -> list[MetricsRecord]:
    bcfg = block_config(cfg, len(setup.devices))
    res = bfl.blockfl_e2e(
        bcfg, setup.devices, setup.fed, cfg.rounds, setup.evaluate, setup.links, setup.compute, cfg.seed, cfg.target_loss
    )
    return [
        MetricsRecord(r.round, r.sim_time_s, r.cum_bits_up, r.cum_bits_down, r.train_loss, r.test_loss, r.test_acc, r.forks, "blockfl")
        for r in res.records
    ]


def extfl_sets(cfg: ExperimentConfig):
    """Per-device training and held-out exceedance sets from simulated queues."""
    e = cfg.evt if cfg.evt is not None else EvtConfig()
    traces = evt.simulate_queues(e.n_devices, e.arrival_rate, e.service_rate, e.horizon, cfg.seed)
    cut = int(round((1.0 - e.test_fraction) * e.horizon))
    train = [evt.exceedances(tr[:cut], e.threshold, i) for i, tr in enumerate(traces)]
    test = [evt.exceedances(tr[cut:], e.threshold, i) for i, tr in enumerate(traces)]
    return e, train, test


def _neg_loglik(sets, p) -> float:
    pooled = np.concatenate([s.samples for s in sets])
    if pooled.size == 0:
        return math.nan
    return -evt.gpd_loglik_grad(pooled, p)[0]


def run_extfl(cfg: ExperimentConfig) -> list[MetricsRecord]:
    """Federated GPD fitting of queue-length exceedances.

    Each round every device with exceedances uploads its five-scalar update and
    the helper broadcasts the new global parameters in the same format.
    Losses are negative mean log-likelihoods of the pooled exceedances.
    """
    if cfg.rounds == 0:
        return []
    e, train, test = extfl_sets(cfg)
    links, compute = link_model(cfg), compute_model(cfg)
    net_rng = derive_rng(cfg.seed, "netsim")
    p = evt.GpdParams(e.init_sigma, e.init_xi)
    records = []
    t = 0.0
    bits_up = bits_down = 0
    for k in range(1, cfg.rounds + 1):
        new, up = evt.federated_gpd_round(train, p, e.lr, e.local_steps, return_messages=True)
        total = sum(len(s) for s in train)
        _, g = evt.gpd_loglik_grad(np.concatenate([s.samples for s in train]), p)
        down = [evt.gpd_message(HELPER, new, g, total)]
        p = new
        timing = price_round(up, down, e.n_devices, links, compute, net_rng, "hd")
        t += timing.total_s
        bits_up += sum(payload_bits(m) for m in up)
        bits_down += sum(payload_bits(m) for m in down)
        records.append(MetricsRecord(k, t, bits_up, bits_down, _neg_loglik(train, p), _neg_loglik(test, p), None, None, "extfl"))
    return records


def completion_latency(records, target_loss: float | None) -> float | None:
    """Simulated time of the first round whose training loss reaches the target."""
    if target_loss is None:
        return None
    for r in records:
        if r.train_loss <= target_loss:
            return r.sim_time_s
    return None
