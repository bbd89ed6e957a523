"""Feed-forward classifier used as the local learner by every protocol.

Parameters live in one flat float64 vector; :class:`ModelSpec` knows how to
slice it into per-layer ``(W, b)`` views. Layer ``l`` maps ``h -> W @ h + b``
with ``W`` of shape ``(out, in)``; hidden layers apply the activation and the
last layer emits raw logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("relu", "sigmoid")
REG_KINDS = ("mse", "cross_entropy")


@dataclass(frozen=True)
class ModelSpec:
    layer_widths: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError("layer_widths needs at least an input and an output width")
        if any(w < 1 for w in widths):
            raise ValueError(f"layer widths must be positive, got {widths}")
        if widths[-1] < 2:
            raise ValueError("output width (number of labels) must be >= 2")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def n_labels(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_params(self) -> int:
        w = self.layer_widths
        return sum(w[i] * w[i + 1] + w[i + 1] for i in range(len(w) - 1))

    def unpack(self, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Split a flat parameter vector into per-layer ``(W, b)`` views."""
        params = check_params(self, params)
        layers = []
        offset = 0
        for fan_in, fan_out in zip(self.layer_widths[:-1], self.layer_widths[1:]):
            W = params[offset : offset + fan_in * fan_out].reshape(fan_out, fan_in)
            offset += fan_in * fan_out
            b = params[offset : offset + fan_out]
            offset += fan_out
            layers.append((W, b))
        return layers

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        """Fan-based uniform weights, zero biases."""
        chunks = []
        for fan_in, fan_out in zip(self.layer_widths[:-1], self.layer_widths[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            chunks.append(rng.uniform(-limit, limit, size=fan_in * fan_out))
            chunks.append(np.zeros(fan_out))
        return np.concatenate(chunks)


def check_params(spec: ModelSpec, params) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1 or params.shape[0] != spec.n_params:
        raise ValueError(
            f"parameter vector has shape {params.shape}, expected ({spec.n_params},)"
        )
    return params


def check_batch(spec: ModelSpec, X, y=None):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ValueError(f"inputs must have shape (n, {spec.input_dim}), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    if y is None:
        return X
    y = np.asarray(y)
    if y.shape != (X.shape[0],):
        raise ValueError(f"labels must have shape ({X.shape[0]},), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError("labels must be integers")
    if y.min() < 0 or y.max() >= spec.n_labels:
        raise ValueError(f"labels must lie in [0, {spec.n_labels})")
    return X, y


def _act(kind, z):
    if kind == "relu":
        return np.maximum(z, 0.0)
    return 1.0 / (1.0 + np.exp(-z))


def _act_d1(kind, z):
    if kind == "relu":
        return (z > 0).astype(np.float64)
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 - s)


def _act_d2(kind, z):
    if kind == "relu":
        return np.zeros_like(z)
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 - s) * (1.0 - 2.0 * s)


def _forward_cache(spec, layers, X):
    hs = [X]
    zs = []
    h = X
    for i, (W, b) in enumerate(layers):
        z = h @ W.T + b
        zs.append(z)
        if i < len(layers) - 1:
            h = _act(spec.activation, z)
            hs.append(h)
    return hs, zs


def _backward(spec, layers, hs, zs, dz):
    """Reverse pass from logit cotangents ``dz`` to a flat parameter gradient."""
    grads = []
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        grads.append(dz.sum(axis=0))
        grads.append((dz.T @ hs[i]).ravel())
        if i > 0:
            dz = (dz @ W) * _act_d1(spec.activation, zs[i - 1])
    return np.concatenate(grads[::-1])


def forward(spec: ModelSpec, params, x) -> np.ndarray:
    """Logits for one input vector ``(d,)`` or a batch ``(n, d)``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = check_batch(spec, x[None, :] if single else x)
    _, zs = _forward_cache(spec, spec.unpack(params), X)
    return zs[-1][0] if single else zs[-1]


def softmax_temperature(z, T: float = 1.0) -> np.ndarray:
    """``exp(z/T) / sum(exp(z/T))`` along the last axis."""
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    s = z / T
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_backward(p, dp, T):
    return p * (dp - (dp * p).sum(axis=-1, keepdims=True)) / T


def loss_and_grad(spec: ModelSpec, params, X, y) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of the T=1 softmax and its gradient."""
    X, y = check_batch(spec, X, y)
    layers = spec.unpack(params)
    hs, zs = _forward_cache(spec, layers, X)
    p = softmax_temperature(zs[-1], 1.0)
    n = X.shape[0]
    rows = np.arange(n)
    loss = float(-np.mean(np.log(np.maximum(p[rows, y], 1e-300))))
    dz = p.copy()
    dz[rows, y] -= 1.0
    dz /= n
    return loss, _backward(spec, layers, hs, zs, dz)


def loss(spec: ModelSpec, params, X, y) -> float:
    X, y = check_batch(spec, X, y)
    p = softmax_temperature(forward(spec, params, X), 1.0)
    return float(-np.mean(np.log(np.maximum(p[np.arange(len(y)), y], 1e-300))))


def accuracy(spec: ModelSpec, params, X, y) -> float:
    X, y = check_batch(spec, X, y)
    return float(np.mean(forward(spec, params, X).argmax(axis=1) == y))


def sgd_step(params, grad, eta: float) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape:
        raise ValueError(f"shape mismatch: params {params.shape} vs grad {grad.shape}")
    return params - eta * grad


def input_jacobian(spec: ModelSpec, params, X, T: float = 1.0, normalized: bool = True):
    """Per-sample Jacobian of the output w.r.t. the input, shape ``(n, L, d)``.

    With ``normalized`` the output is the temperature softmax; otherwise the
    raw logits.
    """
    X = check_batch(spec, X)
    layers = spec.unpack(params)
    hs, zs, Us = _tangent_forward(spec, layers, X)
    if not normalized:
        return Us[-1]
    S = _softmax_jacobian(softmax_temperature(zs[-1], T), T)
    return np.einsum("nkl,nld->nkd", S, Us[-1])


def _tangent_forward(spec, layers, X):
    """Forward pass that also carries d(pre-activation)/d(input) per layer."""
    hs, zs = _forward_cache(spec, layers, X)
    Us = []
    tangent = None
    for i, (W, _) in enumerate(layers):
        if i == 0:
            U = np.broadcast_to(W, (X.shape[0],) + W.shape)
        else:
            U = np.einsum("oi,nid->nod", W, tangent)
        Us.append(U)
        if i < len(layers) - 1:
            tangent = _act_d1(spec.activation, zs[i])[:, :, None] * U
    return hs, zs, Us


def _softmax_jacobian(p, T):
    return (p[:, :, None] * np.eye(p.shape[1])[None] - p[:, :, None] * p[:, None, :]) / T


@dataclass
class LabelTable:
    """Per-label averages; ``values[l]`` is meaningful only where ``present[l]``.

    Absent rows hold NaN so an accidental read is loud.
    """

    values: np.ndarray
    present: np.ndarray
    counts: np.ndarray

    @property
    def n_labels(self) -> int:
        return self.present.shape[0]

    @property
    def row_size(self) -> int:
        return int(np.prod(self.values.shape[1:]))


def group_mean(per_sample: np.ndarray, y, n_labels: int) -> LabelTable:
    y = np.asarray(y)
    sums = np.zeros((n_labels,) + per_sample.shape[1:])
    np.add.at(sums, y, per_sample)
    counts = np.bincount(y, minlength=n_labels)
    return table_from_sums(sums, counts)


def table_from_sums(sums: np.ndarray, counts: np.ndarray) -> LabelTable:
    counts = np.asarray(counts)
    present = counts > 0
    values = np.full(sums.shape, np.nan)
    shape = (-1,) + (1,) * (sums.ndim - 1)
    values[present] = sums[present] / counts[present].astype(np.float64).reshape(shape)
    return LabelTable(values=values, present=present, counts=counts)


def logit_table(spec: ModelSpec, params, X, y, T: float = 1.0) -> LabelTable:
    """Average temperature-normalized logits grouped by ground-truth label."""
    X, y = check_batch(spec, X, y)
    F = softmax_temperature(forward(spec, params, X), T)
    return group_mean(F, y, spec.n_labels)


def input_jacobian_table(spec: ModelSpec, params, X, y, T: float = 1.0) -> LabelTable:
    """Average normalized-output input Jacobians grouped by ground-truth label."""
    X, y = check_batch(spec, X, y)
    return group_mean(input_jacobian(spec, params, X, T), y, spec.n_labels)


def distillation_gap(local, target, reg_kind: str = "mse"):
    """Gap between a local output and its distillation target.

    Returns ``(value, d value / d local)``. ``mse`` is ``||local - target||^2 / 2``;
    ``cross_entropy`` is ``H(target, local)`` with the target held fixed.
    """
    local = np.asarray(local, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if local.shape != target.shape:
        raise ValueError(f"shape mismatch: {local.shape} vs {target.shape}")
    if reg_kind == "mse":
        diff = local - target
        return 0.5 * float(np.sum(diff * diff)), diff
    if reg_kind == "cross_entropy":
        safe = np.maximum(local, 1e-300)
        return float(-np.sum(target * np.log(safe))), -target / safe
    raise ValueError(f"reg_kind must be one of {REG_KINDS}, got {reg_kind!r}")


def output_regularizer(spec: ModelSpec, params, X, targets, mask=None, T=1.0, reg_kind="mse"):
    """Distillation term on normalized outputs, averaged over the batch.

    ``targets`` holds one probability vector per sample; samples with
    ``mask == False`` contribute nothing (but still count in the mean).
    Returns ``(value, parameter gradient)``.
    """
    X = check_batch(spec, X)
    n = X.shape[0]
    targets = np.asarray(targets, dtype=np.float64)
    mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    layers = spec.unpack(params)
    hs, zs = _forward_cache(spec, layers, X)
    p = softmax_temperature(zs[-1], T)
    safe_t = np.where(mask[:, None], targets, p)
    if reg_kind == "mse":
        diff = p - safe_t
        value = 0.5 * float(np.sum(diff[mask] ** 2)) / n
        dz = _softmax_backward(p, diff, T)
    elif reg_kind == "cross_entropy":
        logp = np.log(np.maximum(p, 1e-300))
        value = float(-np.sum(safe_t[mask] * logp[mask])) / n
        dz = (p * safe_t.sum(axis=1, keepdims=True) - safe_t) / T
    else:
        raise ValueError(f"reg_kind must be one of {REG_KINDS}, got {reg_kind!r}")
    dz = np.where(mask[:, None], dz, 0.0) / n
    return value, _backward(spec, layers, hs, zs, dz)


def jacobian_regularizer(spec: ModelSpec, params, X, targets, mask=None, T=1.0):
    """``||J(x) - target||^2 / 2`` on normalized-output input Jacobians.

    Differentiates through the tangent pass (second-order in the
    activations), averaged over the batch. Returns ``(value, gradient)``.
    """
    X = check_batch(spec, X)
    n = X.shape[0]
    targets = np.asarray(targets, dtype=np.float64)
    mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    layers = spec.unpack(params)
    act = spec.activation
    hs, zs, Us = _tangent_forward(spec, layers, X)
    p = softmax_temperature(zs[-1], T)
    S = _softmax_jacobian(p, T)
    J = np.einsum("nkl,nld->nkd", S, Us[-1])

    diff = np.where(mask[:, None, None], J - np.where(mask[:, None, None], targets, 0.0), 0.0)
    value = 0.5 * float(np.sum(diff * diff)) / n
    dJ = diff / n

    dU = np.einsum("nkl,nkd->nld", S, dJ)
    dS = np.einsum("nkd,nld->nkl", dJ, Us[-1])
    dp = (
        np.einsum("nkk->nk", dS)
        - np.einsum("nkj,nj->nk", dS, p)
        - np.einsum("nik,ni->nk", dS, p)
    ) / T
    dz = _softmax_backward(p, dp, T)

    grads = []
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        gW = dz.T @ hs[i]
        if i == 0:
            gW = gW + dU.sum(axis=0)
        else:
            tangent_in = _act_d1(act, zs[i - 1])[:, :, None] * Us[i - 1]
            gW = gW + np.einsum("nod,nid->oi", dU, tangent_in)
        grads.append(dz.sum(axis=0))
        grads.append(gW.ravel())
        if i > 0:
            z_prev = zs[i - 1]
            dh = dz @ W
            dtangent = np.einsum("oi,nod->nid", W, dU)
            d1 = _act_d1(act, z_prev)
            dz = d1 * dh + np.sum(_act_d2(act, z_prev)[:, :, None] * Us[i - 1] * dtangent, axis=2)
            dU = d1[:, :, None] * dtangent
    return value, np.concatenate(grads[::-1])
