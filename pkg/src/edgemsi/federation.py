"""Round engines for the MSI-exchange protocols.

Every ``*_round`` function takes the current device states, a
:class:`Federation` context and the 1-based epoch ``k``, and returns a
:class:`RoundOutput` with fresh device states and the messages that crossed
the air. Cross-device information only ever flows through those messages, so a
channel hook installed on the context (quantizer, noise) changes what the
receivers see.

Device states are treated as values: a round never mutates its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import optimize

from . import nn
from ._random import derive_rng
from .msi import HELPER, MsiMessage

PROTOCOLS = ("csgd", "esgd", "favg", "fsvrg", "cd", "fd", "fjd", "dsgd", "gadmm")
CONSTANT_RATE = ("fsvrg", "gadmm")
DD_PROTOCOLS = ("dsgd", "gadmm")


@dataclass(frozen=True)
class HyperParams:
    eta: float = 0.1
    tau: int | None = 1
    alpha: float = 0.1
    beta: float = 0.9
    rho: float = 1.0
    T: float = 1.0
    reg_kind: str = "mse"
    reg_weight: float = 1.0
    reg_every_step: bool = True
    batch_size: int | None = None
    lr_decay: float | None = 100.0
    fd_accumulator: str = "running_mean"
    inner_tol: float = 1e-8
    inner_max_iter: int = 500

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.tau is not None and (int(self.tau) != self.tau or self.tau < 1):
            raise ValueError("tau must be an integer >= 1 (or None for no checkpoints)")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError("beta must lie in (0, 1]")
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if not self.T > 0:
            raise ValueError("T must be positive")
        if self.reg_kind not in nn.REG_KINDS:
            raise ValueError(f"reg_kind must be one of {nn.REG_KINDS}")
        if self.reg_weight < 0:
            raise ValueError("reg_weight must be nonnegative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_decay is not None and not self.lr_decay > 0:
            raise ValueError("lr_decay must be positive")
        if self.fd_accumulator not in ("running_mean", "weighted", "checkpoint"):
            raise ValueError("fd_accumulator must be running_mean, weighted or checkpoint")

    def is_checkpoint(self, k: int) -> bool:
        return self.tau is not None and k % self.tau == 0


def learning_rate(hp: HyperParams, k: int, protocol: str) -> float:
    """Decaying ``eta / (1 + k / lr_decay)``, constant for FSVRG and GADMM."""
    if protocol in CONSTANT_RATE or hp.lr_decay is None:
        return hp.eta
    return hp.eta / (1.0 + k / hp.lr_decay)


# --------------------------------------------------------------------------
# local objectives


class MLPObjective:
    """Cross-entropy of an :mod:`edgemsi.nn` network on rows of a dataset."""

    def __init__(self, spec: nn.ModelSpec, X, y):
        self.spec = spec
        self.X, self.y = nn.check_batch(spec, X, y)

    def loss_grad(self, params, idx):
        return nn.loss_and_grad(self.spec, params, self.X[idx], self.y[idx])

    def loss(self, params, idx) -> float:
        return nn.loss(self.spec, params, self.X[idx], self.y[idx])


class QuadraticObjective:
    """``0.5 w'Aw - b'w``; ignores sample indices. Used for exact checks."""

    def __init__(self, A, b):
        b = np.atleast_1d(np.asarray(b, dtype=np.float64))
        A = np.asarray(A, dtype=np.float64)
        A = A * np.eye(b.size) if A.ndim == 0 else np.atleast_2d(A)
        if A.shape != (b.size, b.size):
            raise ValueError("A must be square and match b")
        self.A, self.b = A, b

    def loss_grad(self, params, idx=None):
        w = np.asarray(params, dtype=np.float64)
        return float(0.5 * w @ self.A @ w - self.b @ w), self.A @ w - self.b

    def loss(self, params, idx=None) -> float:
        return self.loss_grad(params, idx)[0]

    def minimizer(self) -> np.ndarray:
        return np.linalg.solve(self.A, self.b)

    def solve_penalized(self, linear, rho, anchors):
        """argmin of the loss + linear'w + rho/2 sum ||w - a||^2 in closed form."""
        n = len(anchors)
        lhs = self.A + rho * n * np.eye(self.b.size)
        rhs = self.b - linear + rho * sum(anchors, np.zeros_like(self.b))
        return np.linalg.solve(lhs, rhs)


# --------------------------------------------------------------------------
# state


@dataclass
class DeviceState:
    id: int
    params: np.ndarray
    shard: np.ndarray
    aux: dict = field(default_factory=dict)


@dataclass
class RoundOutput:
    devices: list[DeviceState]
    uplink: list[MsiMessage]
    downlink: list[MsiMessage]
    info: dict = field(default_factory=dict)

    @property
    def messages(self) -> list[MsiMessage]:
        return self.uplink + self.downlink


Channel = Callable[[MsiMessage], MsiMessage]


@dataclass
class Federation:
    """Everything a round needs besides the device states.

    ``objectives`` holds one local objective per device (the same object may
    be shared). ``uplink``/``downlink`` are optional channel hooks applied to
    every device-sent / helper-sent message before delivery.
    """

    objectives: Sequence
    hp: HyperParams
    protocol: str = "favg"
    seed: int = 0
    element_bits: int = 32
    mixing: np.ndarray | None = None
    knowledge: tuple | None = None
    uplink: Channel | None = None
    downlink: Channel | None = None

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}")
        if self.mixing is not None:
            self.mixing = validate_mixing(self.mixing)

    def objective(self, dev: DeviceState):
        return self.objectives[dev.id]

    def batch(self, dev: DeviceState, k: int) -> np.ndarray:
        bs = self.hp.batch_size
        if bs is None or bs >= len(dev.shard):
            return dev.shard
        rng = derive_rng(self.seed, "batch", dev.id, k)
        return np.sort(rng.choice(dev.shard, size=bs, replace=False))

    def eta(self, k: int) -> float:
        return learning_rate(self.hp, k, self.protocol)

    def send_up(self, msg: MsiMessage) -> MsiMessage:
        return self.uplink(msg) if self.uplink is not None else msg

    def send_down(self, msg: MsiMessage) -> MsiMessage:
        return self.downlink(msg) if self.downlink is not None else msg

    def message(self, origin, kind, payload, **kw) -> MsiMessage:
        return MsiMessage(origin, kind, payload, self.element_bits, **kw)


def _mean(arrays) -> np.ndarray:
    return np.mean(np.stack(list(arrays)), axis=0)


def _require(devices):
    if not devices:
        raise ValueError("empty device set")


def init_devices(protocol: str, params0, shards, labels: int | None = None, input_dim: int | None = None):
    """Fresh device states sharing ``params0``, with protocol-specific aux."""
    if protocol not in PROTOCOLS:
        raise ValueError(f"protocol must be one of {PROTOCOLS}")
    params0 = np.asarray(params0, dtype=np.float64)
    devices = []
    for i, shard in enumerate(shards):
        aux: dict = {}
        if protocol in ("esgd", "fsvrg"):
            aux["w_hat"] = params0.copy()
        elif protocol == "cd":
            aux["teacher"] = None
        elif protocol in ("fd", "fjd"):
            if labels is None:
                raise ValueError("fd/fjd need the label count")
            row = (labels,) if protocol == "fd" else (labels, input_dim)
            aux["acc_sums"] = np.zeros((labels,) + row)
            aux["acc_counts"] = np.zeros(labels)
            aux["global"] = None
        elif protocol == "gadmm":
            aux["lam"] = np.zeros_like(params0)
            aux["left"] = params0.copy()
            aux["right"] = params0.copy()
        devices.append(DeviceState(i, params0.copy(), np.asarray(shard, dtype=np.int64), aux))
    return devices


def state_param_count(dev: DeviceState) -> int:
    """Model-sized vectors held in device memory, counted in scalars."""
    n = dev.params.size
    for key in ("teacher", "w_hat"):
        value = dev.aux.get(key)
        if value is not None:
            n += np.asarray(value).size
    return n


# --------------------------------------------------------------------------
# parameter MSI protocols


def csgd_round(devices, fed: Federation, k: int) -> RoundOutput:
    """Every device applies the mean of all devices' current gradients."""
    _require(devices)
    eta = fed.eta(k)
    up = []
    for dev in devices:
        _, g = fed.objective(dev).loss_grad(dev.params, fed.batch(dev, k))
        up.append(fed.send_up(fed.message(dev.id, "gradient", g)))
    down = fed.send_down(fed.message(HELPER, "gradient", _mean(m.payload for m in up)))
    new = [replace(d, params=nn.sgd_step(d.params, down.payload, eta)) for d in devices]
    return RoundOutput(new, up, [down])


def local_sgd_round(devices, fed: Federation, k: int) -> RoundOutput:
    """Independent local steps; no messages."""
    _require(devices)
    eta = fed.eta(k)
    new = []
    for dev in devices:
        _, g = fed.objective(dev).loss_grad(dev.params, fed.batch(dev, k))
        new.append(replace(dev, params=nn.sgd_step(dev.params, g, eta)))
    return RoundOutput(new, [], [])


def esgd_round(devices, fed: Federation, k: int) -> RoundOutput:
    """Elastic averaging toward a running mean of the device weights."""
    _require(devices)
    hp = fed.hp
    eta = fed.eta(k)
    up = [fed.send_up(fed.message(d.id, "weights", d.params)) for d in devices]
    w_bar = _mean(m.payload for m in up)
    w_hat = (1.0 - hp.beta) * devices[0].aux["w_hat"] + hp.beta * w_bar
    down = fed.send_down(fed.message(HELPER, "weights", w_hat))
    new = []
    for dev in devices:
        _, g = fed.objective(dev).loss_grad(dev.params, fed.batch(dev, k))
        w = (1.0 - hp.alpha) * dev.params - eta * g + hp.alpha * down.payload
        new.append(replace(dev, params=w, aux={**dev.aux, "w_hat": down.payload}))
    return RoundOutput(new, up, [down])


def favg_round(devices, fed: Federation, k: int) -> RoundOutput:
    """Gradient averaging every ``tau`` epochs, local SGD otherwise."""
    if fed.hp.is_checkpoint(k):
        return csgd_round(devices, fed, k)
    return local_sgd_round(devices, fed, k)


def fsvrg_round(devices, fed: Federation, k: int) -> RoundOutput:
    """Variance-reduced checkpoint step around a tracked global weight.

    At a checkpoint devices upload weights, the helper moves the global weight
    by the shard-size weighted mean offset, devices upload their full-shard
    gradient at the new global weight, and each device steps with
    ``mean_grad(w_hat) + g(w) - g(w_hat)`` on its current mini-batch.
    """
    _require(devices)
    eta = fed.eta(k)
    if not fed.hp.is_checkpoint(k):
        return local_sgd_round(devices, fed, k)
    up_w = [fed.send_up(fed.message(d.id, "weights", d.params)) for d in devices]
    sizes = np.array([len(d.shard) for d in devices], dtype=np.float64)
    n = sizes.sum()
    prev = devices[0].aux["w_hat"]
    offset = np.zeros_like(prev)
    for size, m in zip(sizes, up_w):
        offset = offset + (size / n) * (m.payload - prev)
    down_w = fed.send_down(fed.message(HELPER, "weights", prev + offset))
    w_hat = down_w.payload
    up_g = []
    for dev in devices:
        _, g_full = fed.objective(dev).loss_grad(w_hat, dev.shard)
        up_g.append(fed.send_up(fed.message(dev.id, "gradient", g_full, phase=1)))
    down_g = fed.send_down(fed.message(HELPER, "gradient", _mean(m.payload for m in up_g), phase=1))
    new = []
    for dev in devices:
        obj = fed.objective(dev)
        idx = fed.batch(dev, k)
        _, g_w = obj.loss_grad(dev.params, idx)
        _, g_hat = obj.loss_grad(w_hat, idx)
        w = dev.params - eta * (down_g.payload + g_w - g_hat)
        new.append(replace(dev, params=w, aux={**dev.aux, "w_hat": w_hat}))
    return RoundOutput(new, up_w + up_g, [down_w, down_g])


def _use_regularizer(hp: HyperParams, k: int) -> bool:
    return hp.reg_every_step or hp.is_checkpoint(k)


def cd_round(devices, fed: Federation, k: int) -> RoundOutput:
    """Co-distillation against the stored global averaged model.

    Checkpoints refresh the teacher (weights up, average down) before the
    step; between checkpoints the stale teacher keeps regularizing. Until the
    first checkpoint there is no teacher and the step is plain SGD.
    """
    _require(devices)
    hp = fed.hp
    eta = fed.eta(k)
    up, down = [], []
    teachers = [d.aux.get("teacher") for d in devices]
    if hp.is_checkpoint(k):
        up = [fed.send_up(fed.message(d.id, "weights", d.params)) for d in devices]
        msg = fed.send_down(fed.message(HELPER, "weights", _mean(m.payload for m in up)))
        down = [msg]
        teachers = [msg.payload] * len(devices)
    new = []
    for dev, teacher in zip(devices, teachers):
        obj = fed.objective(dev)
        idx = fed.batch(dev, k)
        _, g = obj.loss_grad(dev.params, idx)
        if teacher is not None and _use_regularizer(hp, k):
            X = obj.X[idx]
            target = nn.softmax_temperature(nn.forward(obj.spec, teacher, X), hp.T)
            _, psi = nn.output_regularizer(obj.spec, dev.params, X, target, None, hp.T, hp.reg_kind)
            g = g + hp.reg_weight * psi
        new.append(replace(dev, params=nn.sgd_step(dev.params, g, eta), aux={**dev.aux, "teacher": teacher}))
    return RoundOutput(new, up, down)


# --------------------------------------------------------------------------
# output MSI protocols


def peer_average(tables: Sequence[nn.LabelTable], exclude: int) -> nn.LabelTable:
    """Per-label mean over every table except ``exclude``, skipping absent rows."""
    L = tables[0].n_labels
    sums = np.zeros(tables[0].values.shape)
    counts = np.zeros(L, dtype=np.int64)
    for j, t in enumerate(tables):
        if j == exclude:
            continue
        sums[t.present] += t.values[t.present]
        counts += t.present
    return nn.table_from_sums(sums, counts)


def _distill_round(devices, fed: Federation, k: int, kind: str) -> RoundOutput:
    _require(devices)
    if len(devices) < 2:
        raise ValueError("output-MSI protocols need at least two devices")
    hp = fed.hp
    if kind == "jacobian_table" and hp.reg_kind != "mse":
        raise ValueError("Jacobian distillation supports reg_kind='mse' only")
    eta = fed.eta(k)
    weight = float(k) if hp.fd_accumulator == "weighted" else 1.0

    accs = []
    batches = []
    for dev in devices:
        obj = fed.objective(dev)
        idx = fed.batch(dev, k)
        X, y = obj.X[idx], obj.y[idx]
        batches.append((idx, X, y))
        if kind == "logit_table":
            per_sample = nn.softmax_temperature(nn.forward(obj.spec, dev.params, X), hp.T)
        else:
            per_sample = nn.input_jacobian(obj.spec, dev.params, X, hp.T)
        sums = dev.aux["acc_sums"].copy()
        np.add.at(sums, y, weight * per_sample)
        counts = dev.aux["acc_counts"] + weight * np.bincount(y, minlength=obj.spec.n_labels)
        accs.append((sums, counts))

    up, down = [], []
    globals_ = [d.aux["global"] for d in devices]
    if hp.is_checkpoint(k):
        tables = []
        for dev, (sums, counts) in zip(devices, accs):
            if hp.fd_accumulator == "checkpoint":
                if fed.knowledge is None:
                    raise ValueError("checkpoint accumulator needs a shared knowledge set")
                obj = fed.objective(dev)
                KX, Ky = fed.knowledge
                table_fn = nn.logit_table if kind == "logit_table" else nn.input_jacobian_table
                local = table_fn(obj.spec, dev.params, KX, Ky, hp.T)
            else:
                local = nn.table_from_sums(sums, counts)
            msg = fed.send_up(fed.message(dev.id, kind, np.nan_to_num(local.values), present=local.present))
            up.append(msg)
            tables.append(_table_of(msg))
        globals_ = []
        for pos, dev in enumerate(devices):
            peer = peer_average(tables, exclude=pos)
            msg = fed.send_down(
                fed.message(HELPER, kind, np.nan_to_num(peer.values), present=peer.present, dest=dev.id)
            )
            down.append(msg)
            globals_.append(_table_of(msg))
        accs = [(np.zeros_like(s), np.zeros_like(c)) for s, c in accs]

    new = []
    for dev, (idx, X, y), glob, (sums, counts) in zip(devices, batches, globals_, accs):
        obj = fed.objective(dev)
        _, g = obj.loss_grad(dev.params, idx)
        if glob is not None and _use_regularizer(hp, k):
            mask = glob.present[y]
            if mask.any():
                targets = np.where(
                    mask.reshape((-1,) + (1,) * (glob.values.ndim - 1)),
                    np.nan_to_num(glob.values[y]),
                    0.0,
                )
                if kind == "logit_table":
                    _, psi = nn.output_regularizer(obj.spec, dev.params, X, targets, mask, hp.T, hp.reg_kind)
                else:
                    _, psi = nn.jacobian_regularizer(obj.spec, dev.params, X, targets, mask, hp.T)
                g = g + hp.reg_weight * psi
        aux = {**dev.aux, "acc_sums": sums, "acc_counts": counts, "global": glob}
        new.append(replace(dev, params=nn.sgd_step(dev.params, g, eta), aux=aux))
    return RoundOutput(new, up, down)


def _table_of(msg: MsiMessage) -> nn.LabelTable:
    values = np.where(
        msg.present.reshape((-1,) + (1,) * (msg.payload.ndim - 1)), msg.payload, np.nan
    )
    return nn.LabelTable(values, msg.present.copy(), msg.present.astype(np.int64))


def fd_round(devices, fed: Federation, k: int) -> RoundOutput:
    """Federated distillation over per-label average logit tables.

    Each device keeps a running per-label mean of its normalized logits. At a
    checkpoint it uploads the table; the helper returns to device ``i`` the
    mean of the other devices' rows. The device then distills each training
    sample toward the returned row of its ground-truth label; samples whose
    label no peer holds get no regularizer.
    """
    return _distill_round(devices, fed, k, "logit_table")


def fjd_round(devices, fed: Federation, k: int) -> RoundOutput:
    """As :func:`fd_round` with per-label input Jacobians of the normalized output."""
    return _distill_round(devices, fed, k, "jacobian_table")


# --------------------------------------------------------------------------
# device-to-device protocols


def validate_mixing(A) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("mixing matrix must be square")
    if np.any(A < 0):
        raise ValueError("mixing matrix entries must be nonnegative")
    if np.any(np.diag(A) <= 0):
        raise ValueError("mixing matrix diagonal must be positive")
    if not np.array_equal(A, A.T):
        raise ValueError("mixing matrix must be symmetric")
    return A


def mixing_matrix(kind: str, M: int) -> np.ndarray:
    """Identity, complete (all-ones), ring or chain 0/1 connectivity."""
    if M < 1:
        raise ValueError("M must be >= 1")
    if kind == "identity":
        return np.eye(M)
    if kind == "complete":
        return np.ones((M, M))
    A = np.eye(M)
    for i in range(M - 1):
        A[i, i + 1] = A[i + 1, i] = 1.0
    if kind == "ring":
        if M > 2:
            A[0, M - 1] = A[M - 1, 0] = 1.0
        return A
    if kind == "chain":
        return A
    raise ValueError(f"unknown mixing kind {kind!r}")


def dsgd_round(devices, fed: Federation, k: int) -> RoundOutput:
    """Neighbor-weighted averaging followed by a local gradient step.

    Devices with at least one neighbor broadcast their weights once; the
    average is normalized by the column sum of the mixing matrix.
    """
    _require(devices)
    A = fed.mixing
    if A is None or A.shape[0] != len(devices):
        raise ValueError("dsgd needs a mixing matrix matching the device count")
    eta = fed.eta(k)
    M = len(devices)
    up = []
    received = {}
    for dev in devices:
        if np.any(np.delete(A[dev.id], dev.id) > 0):
            msg = fed.send_up(fed.message(dev.id, "weights", dev.params))
            up.append(msg)
            received[dev.id] = msg.payload
    new = []
    for i, dev in enumerate(devices):
        acc = np.zeros_like(dev.params)
        for j in range(M):
            if A[j, i] > 0:
                w_j = dev.params if j == i else received[j]
                acc = acc + A[j, i] * w_j
        w_tilde = acc / A[:, i].sum()
        _, g = fed.objective(dev).loss_grad(dev.params, fed.batch(dev, k))
        new.append(replace(dev, params=nn.sgd_step(w_tilde, g, eta)))
    return RoundOutput(new, up, [])


def _penalized_argmin(obj, start, idx, linear, rho, anchors, tol, max_iter):
    if hasattr(obj, "solve_penalized"):
        return obj.solve_penalized(linear, rho, anchors)

    def value_grad(w):
        f, g = obj.loss_grad(w, idx)
        f += float(linear @ w)
        g = g + linear
        for a in anchors:
            d = w - a
            f += 0.5 * rho * float(d @ d)
            g = g + rho * d
        return f, g

    res = optimize.minimize(
        value_grad,
        np.array(start, dtype=np.float64),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": max_iter, "gtol": tol, "ftol": 0.0},
    )
    return res.x


def gadmm_round(devices, fed: Federation, k: int) -> RoundOutput:
    """Group ADMM on an open chain in device order.

    Heads (even 0-based positions, i.e. odd 1-based) solve their penalized
    local problems against the last received tail weights and broadcast;
    tails then solve against the fresh head weights and broadcast; finally
    every link dual moves by ``rho`` times its primal residual. Chain ends
    drop the terms of their missing neighbor. ``lam`` in device ``j``'s aux
    is the dual of link ``(j, j+1)``.
    """
    _require(devices)
    M = len(devices)
    if M < 2:
        raise ValueError("GADMM needs at least two devices")
    hp = fed.hp
    rho = hp.rho
    devs = [replace(d, aux=dict(d.aux)) for d in devices]
    up = []

    def solve(j):
        dev = devs[j]
        obj = fed.objective(dev)
        linear = np.zeros_like(dev.params)
        anchors = []
        if j > 0:
            linear = linear - devs[j - 1].aux["lam"]
            anchors.append(dev.aux["left"])
        if j < M - 1:
            linear = linear + dev.aux["lam"]
            anchors.append(dev.aux["right"])
        return _penalized_argmin(
            obj, dev.params, dev.shard, linear, rho, anchors, hp.inner_tol, hp.inner_max_iter
        )

    for phase, group in enumerate((range(0, M, 2), range(1, M, 2))):
        solved = {j: solve(j) for j in group}
        for j, w in solved.items():
            devs[j].params = w
            msg = fed.send_up(fed.message(j, "weights", w, phase=phase))
            up.append(msg)
            if j > 0:
                devs[j - 1].aux["right"] = msg.payload
            if j < M - 1:
                devs[j + 1].aux["left"] = msg.payload

    residuals = []
    for j in range(M - 1):
        r = devs[j].params - devs[j].aux["right"]
        residuals.append(r)
        devs[j].aux["lam"] = devs[j].aux["lam"] + rho * r
    return RoundOutput(devs, up, [], info={"residuals": residuals})


ROUND_FUNCTIONS = {
    "csgd": csgd_round,
    "esgd": esgd_round,
    "favg": favg_round,
    "fsvrg": fsvrg_round,
    "cd": cd_round,
    "fd": fd_round,
    "fjd": fjd_round,
    "dsgd": dsgd_round,
    "gadmm": gadmm_round,
}


def run_rounds(devices, fed: Federation, rounds: int, start: int = 1):
    """Drive ``rounds`` epochs of ``fed.protocol``; yields each RoundOutput."""
    fn = ROUND_FUNCTIONS[fed.protocol]
    for k in range(start, start + rounds):
        out = fn(devices, fed, k)
        devices = out.devices
        yield out

