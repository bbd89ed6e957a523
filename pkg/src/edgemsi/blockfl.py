"""Blockchain-assisted federated learning latency model.

Miners race with exponential proof-of-work times. The earliest block wins;
if another miner finishes within the propagation delay of the winner the
ledger forks and the round pays a fixed rollback delay.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import nn
from ._random import derive_rng
from .federation import DeviceState, Federation
from .msi import HELPER
from .netsim import ComputeModel, LinkModel, price_round


@dataclass(frozen=True)
class Malfunction:
    prob: float = 0.5
    noise_mean: float = -0.1
    noise_var: float = 0.01

    def __post_init__(self):
        if not 0.0 <= self.prob <= 1.0:
            raise ValueError("malfunction prob must lie in [0, 1]")
        if self.noise_var < 0:
            raise ValueError("noise_var must be nonnegative")


@dataclass(frozen=True)
class BlockFlConfig:
    n_miners: int = 10
    lambda_bgr: float | None = None
    t_bp_s: float = 1.0
    t_wait_s: float = 0.0
    rollback_s: float = 2.0
    malfunction: Malfunction | None = None

    def __post_init__(self):
        if self.n_miners < 1:
            raise ValueError("n_miners must be >= 1")
        if self.lambda_bgr is not None and not self.lambda_bgr > 0:
            raise ValueError("lambda_bgr must be positive")
        if self.t_bp_s < 0 or self.t_wait_s < 0 or self.rollback_s < 0:
            raise ValueError("delays must be nonnegative")

    @property
    def rate(self) -> float:
        """Configured block generation rate, or the closed-form optimum."""
        if self.lambda_bgr is not None:
            return self.lambda_bgr
        return optimal_lambda(self.n_miners, self.t_bp_s, self.t_wait_s)


@dataclass(frozen=True)
class BlockRoundOutcome:
    mining_s: float
    forked: bool
    extra_s: float
    total_s: float


def optimal_lambda(n_miners: int, t_bp_s: float, t_wait_s: float = 0.0) -> float:
    """``2 / (T_bp (1 + sqrt(1 + 4 N (1 + T_wait / T_bp))))``."""
    if not t_bp_s > 0:
        raise ValueError("t_bp_s must be positive")
    if not n_miners > 0 or t_wait_s < 0:
        raise ValueError("n_miners must be positive and t_wait_s nonnegative")
    return 2.0 / (t_bp_s * (1.0 + math.sqrt(1.0 + 4.0 * n_miners * (1.0 + t_wait_s / t_bp_s))))


def simulate_block_round(cfg: BlockFlConfig, rng: np.random.Generator) -> BlockRoundOutcome:
    finish = rng.exponential(1.0 / cfg.rate, size=cfg.n_miners)
    winner = int(np.argmin(finish))
    mining = float(finish[winner])
    others = np.delete(finish, winner)
    forked = bool(np.any(others - mining < cfg.t_bp_s))
    extra = cfg.rollback_s if forked else 0.0
    total = cfg.t_wait_s + mining + cfg.t_bp_s + extra
    return BlockRoundOutcome(mining, forked, extra, total)


def fork_probability(n_miners: int, lam: float, t_bp_s: float) -> float:
    """Closed form ``1 - exp(-(N - 1) lam T_bp)`` of the memoryless race."""
    return 1.0 - math.exp(-(n_miners - 1) * lam * t_bp_s)


def expected_block_latency(cfg: BlockFlConfig) -> float:
    lam = cfg.rate
    return cfg.t_wait_s + 1.0 / (cfg.n_miners * lam) + cfg.t_bp_s + cfg.rollback_s * fork_probability(cfg.n_miners, lam, cfg.t_bp_s)


def apply_malfunction(aggregate, malfunction: Malfunction | None, n_miners: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Per-miner copies of the aggregate; each miner independently, with
    probability ``prob``, adds i.i.d. N(mean, var) noise to every element."""
    aggregate = np.asarray(aggregate, dtype=np.float64)
    out = []
    for _ in range(n_miners):
        if malfunction is None or malfunction.prob == 0.0:
            out.append(aggregate.copy())
            continue
        hit = rng.random() < malfunction.prob
        noise = rng.normal(malfunction.noise_mean, math.sqrt(malfunction.noise_var), size=aggregate.shape)
        out.append(aggregate + noise if hit else aggregate.copy())
    return out


@dataclass
class BlockFlRecord:
    round: int
    sim_time_s: float
    cum_bits_up: int
    cum_bits_down: int
    train_loss: float
    test_loss: float
    test_acc: float
    forks: int


@dataclass
class BlockFlResult:
    records: list[BlockFlRecord] = field(default_factory=list)
    completion_latency_s: float | None = None
    completion_round: int | None = None


Evaluator = Callable[[list[DeviceState]], tuple[float, float, float]]


def blockfl_round(devices, fed: Federation, k: int, cfg: BlockFlConfig, rng: np.random.Generator):
    """One training round through the miners.

    Every device takes a local step and uploads its weights to its miner.
    The block carries all local updates; miner ``i`` aggregates them (and may
    malfunction) and device ``i`` adopts that aggregate. Returns
    ``(devices', uplink, downlink)``.
    """
    if len(devices) != cfg.n_miners:
        raise ValueError("one miner per device is required")
    eta = fed.eta(k)
    up = []
    for dev in devices:
        _, g = fed.objective(dev).loss_grad(dev.params, fed.batch(dev, k))
        w = nn.sgd_step(dev.params, g, eta)
        up.append(fed.send_up(fed.message(dev.id, "weights", w)))
    block = np.concatenate([m.payload for m in up])
    down = fed.send_down(fed.message(HELPER, "weights", block))
    P = devices[0].params.size
    received = down.payload.reshape(len(devices), P)
    aggregate = received.mean(axis=0)
    per_miner = apply_malfunction(aggregate, cfg.malfunction, cfg.n_miners, rng)
    new = [replace(dev, params=per_miner[i]) for i, dev in enumerate(devices)]
    return new, up, [down]


def blockfl_e2e(
    cfg: BlockFlConfig,
    devices,
    fed: Federation,
    rounds: int,
    evaluate: Evaluator,
    links: LinkModel = LinkModel(),
    compute: ComputeModel = ComputeModel(),
    seed: int = 0,
    target_loss: float | None = None,
    stop_at_target: bool = False,
) -> BlockFlResult:
    """Train through the chain, adding FL round time and block round time.

    Completion latency is the cumulative time of the first round whose
    training loss is at or below ``target_loss``; ``None`` if never reached.
    """
    block_rng = derive_rng(seed, "blockfl.mining")
    fault_rng = derive_rng(seed, "blockfl.malfunction")
    net_rng = derive_rng(seed, "netsim")
    result = BlockFlResult()
    t = 0.0
    bits_up = bits_down = 0
    forks = 0
    for k in range(1, rounds + 1):
        devices, up, down = blockfl_round(devices, fed, k, cfg, fault_rng)
        timing = price_round(up, down, len(devices), links, compute, net_rng, split="hd")
        block = simulate_block_round(cfg, block_rng)
        forks += int(block.forked)
        t += timing.total_s + block.total_s
        bits_up += sum(m.element_count * m.element_bits for m in up)
        bits_down += sum(m.element_count * m.element_bits for m in down)
        train_loss, test_loss, test_acc = evaluate(devices)
        result.records.append(BlockFlRecord(k, t, bits_up, bits_down, train_loss, test_loss, test_acc, forks))
        if target_loss is not None and result.completion_latency_s is None and train_loss <= target_loss:
            result.completion_latency_s = t
            result.completion_round = k
            if stop_at_target:
                break
    return result


def latency_grid(cfg: BlockFlConfig, lambdas, trials: int, seed: int, fl_round_s: float = 0.0) -> np.ndarray:
    """Mean simulated end-to-end round latency (FL round time plus block
    round) at each rate, from ``trials`` sampled block rounds per point."""
    out = []
    for j, lam in enumerate(lambdas):
        rng = derive_rng(seed, "latency_grid", j)
        c = replace(cfg, lambda_bgr=float(lam))
        total = sum(simulate_block_round(c, rng).total_s for _ in range(trials))
        out.append(fl_round_s + total / trials)
    return np.asarray(out)
