"""MLP forward pass, regularized cross-entropy loss and backprop.

Every function takes a :class:`ParamVector` and never mutates it.  Batch
normalization follows each hidden linear layer (before the ReLU) when enabled.
In ``train`` mode it normalizes with batch statistics; ``eval`` mode needs a
:class:`BatchNormStats` carrying running statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import Architecture, Layout, ParamVector

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
MODES = ("train", "eval")
L2_SCOPES = ("weights", "all")


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    cross_entropy: float
    l2_term: float
    accuracy: float


@dataclass
class BatchNormStats:
    """Running mean/variance per batch-normalized layer (not trainable)."""

    mean: dict[int, np.ndarray] = field(default_factory=dict)
    var: dict[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def fresh(cls, arch: Architecture) -> "BatchNormStats":
        stats = cls()
        for layer, on in enumerate(arch.use_batchnorm):
            if on:
                width = arch.layer_sizes[layer + 1]
                stats.mean[layer] = np.zeros(width)
                stats.var[layer] = np.ones(width)
        return stats

    def update(self, batch_stats: dict[int, tuple[np.ndarray, np.ndarray]], momentum: float = BN_MOMENTUM) -> None:
        for layer, (mu, var) in batch_stats.items():
            self.mean[layer] = momentum * self.mean[layer] + (1.0 - momentum) * mu
            self.var[layer] = momentum * self.var[layer] + (1.0 - momentum) * var

    def copy(self) -> "BatchNormStats":
        return BatchNormStats(
            {k: v.copy() for k, v in self.mean.items()},
            {k: v.copy() for k, v in self.var.items()},
        )


def init_params(arch: Architecture, seed: int, scheme: str = "he_normal") -> ParamVector:
    """He-normal weights (variance 2/fan_in), zero biases, unit BN scale."""
    if scheme != "he_normal":
        raise ValueError(f"unknown init scheme {scheme!r}")
    layout = Layout.for_arch(arch)
    params = ParamVector.zeros(layout)
    rng = np.random.default_rng(seed)
    for seg, view in params.iter_segments():
        if seg.kind == "weight":
            fan_in = seg.shape[0]
            view[...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=seg.shape)
        elif seg.kind == "bn_gamma":
            view[...] = 1.0
    return params


def _check_inputs(layout: Layout, inputs: np.ndarray) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    n_in = layout.arch.layer_sizes[0]
    if x.ndim != 2 or x.shape[1] != n_in:
        raise ValueError(f"inputs must have shape (batch, {n_in}), got {np.shape(inputs)}")
    return x


def _check_labels(labels, n: int, n_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integers")
        y = y.astype(np.int64)
    if n and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes}), got range [{y.min()}, {y.max()}]")
    return y


def _run(params: ParamVector, x: np.ndarray, mode: str, bn_stats: BatchNormStats | None):
    """Forward pass keeping what backprop needs."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    arch = params.arch
    a = x
    cache = []
    batch_stats = {}
    for layer in range(arch.n_layers):
        w = params.segment(layer, "weight")
        b = params.segment(layer, "bias")
        z = a @ w + b
        entry = {"a_in": a}
        if layer == arch.n_layers - 1:
            cache.append(entry)
            return z, cache, batch_stats
        if arch.use_batchnorm[layer]:
            if mode == "train":
                mu = z.mean(axis=0)
                var = z.var(axis=0)
                batch_stats[layer] = (mu, var)
            else:
                if bn_stats is None or layer not in bn_stats.mean:
                    raise ValueError("eval mode with batch norm needs running statistics")
                mu, var = bn_stats.mean[layer], bn_stats.var[layer]
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            zhat = (z - mu) * inv_std
            z = params.segment(layer, "bn_gamma") * zhat + params.segment(layer, "bn_beta")
            entry.update(zhat=zhat, inv_std=inv_std)
        entry["pre"] = z
        a = np.maximum(z, 0.0)
        cache.append(entry)
    raise AssertionError("unreachable")


def forward(params: ParamVector, inputs, mode: str = "train", bn_stats: BatchNormStats | None = None) -> np.ndarray:
    """Logits of shape (batch, n_classes)."""
    x = _check_inputs(params.layout, inputs)
    logits, _, _ = _run(params, x, mode, bn_stats)
    return logits


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _l2_selector(layout: Layout, l2_scope: str) -> np.ndarray | None:
    if l2_scope == "weights":
        return layout.kind_mask(("weight",))
    if l2_scope == "all":
        return None
    raise ValueError(f"l2_scope must be one of {L2_SCOPES}, got {l2_scope!r}")


def l2_term(params: ParamVector, weight_decay: float, l2_scope: str = "weights") -> float:
    """``weight_decay * 0.5 * sum(w**2)`` over the regularized coordinates."""
    sel = _l2_selector(params.layout, l2_scope)
    v = params.values if sel is None else params.values[sel]
    return float(weight_decay * 0.5 * np.dot(v, v))


def _breakdown(params, logits, y, weight_decay, l2_scope):
    logp = _log_softmax(logits)
    n = y.shape[0]
    ce = float(-logp[np.arange(n), y].mean())
    reg = l2_term(params, weight_decay, l2_scope)
    acc = float(np.mean(logits.argmax(axis=1) == y))
    return LossBreakdown(ce + reg, ce, reg, acc), logp


def loss(
    params: ParamVector,
    inputs,
    labels,
    weight_decay: float = 0.0,
    mode: str = "train",
    bn_stats: BatchNormStats | None = None,
    l2_scope: str = "weights",
) -> LossBreakdown:
    """Mean softmax cross-entropy plus the L2 penalty, with accuracy."""
    if weight_decay < 0:
        raise ValueError("weight_decay must be >= 0")
    x = _check_inputs(params.layout, inputs)
    y = _check_labels(labels, x.shape[0], params.arch.n_classes)
    logits, _, _ = _run(params, x, mode, bn_stats)
    return _breakdown(params, logits, y, weight_decay, l2_scope)[0]


def loss_and_grad(
    params: ParamVector,
    inputs,
    labels,
    weight_decay: float = 0.0,
    mode: str = "train",
    bn_stats: BatchNormStats | None = None,
    l2_scope: str = "weights",
):
    """Return ``(LossBreakdown, gradient values, batch BN statistics)``.

    The gradient is a flat array in ``params.layout`` order.  Batch
    statistics are empty unless ``mode == "train"`` and the net has BN.
    """
    if weight_decay < 0:
        raise ValueError("weight_decay must be >= 0")
    layout = params.layout
    arch = layout.arch
    x = _check_inputs(layout, inputs)
    y = _check_labels(labels, x.shape[0], arch.n_classes)
    logits, cache, batch_stats = _run(params, x, mode, bn_stats)
    lb, logp = _breakdown(params, logits, y, weight_decay, l2_scope)

    n = x.shape[0]
    g = np.zeros(layout.size)
    grad_view = ParamVector(g, layout)
    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    for layer in range(arch.n_layers - 1, -1, -1):
        entry = cache[layer]
        if layer < arch.n_layers - 1:
            # delta currently holds dL/d(post-activation); go back through ReLU and BN
            delta = delta * (entry["pre"] > 0)
            if arch.use_batchnorm[layer]:
                zhat = entry["zhat"]
                grad_view.segment(layer, "bn_gamma")[...] = (delta * zhat).sum(axis=0)
                grad_view.segment(layer, "bn_beta")[...] = delta.sum(axis=0)
                dzhat = delta * params.segment(layer, "bn_gamma")
                if mode == "train":
                    delta = entry["inv_std"] / n * (
                        n * dzhat - dzhat.sum(axis=0) - zhat * (dzhat * zhat).sum(axis=0)
                    )
                else:
                    delta = dzhat * entry["inv_std"]
        grad_view.segment(layer, "weight")[...] = entry["a_in"].T @ delta
        grad_view.segment(layer, "bias")[...] = delta.sum(axis=0)
        if layer > 0:
            delta = delta @ params.segment(layer, "weight").T

    if weight_decay:
        sel = _l2_selector(layout, l2_scope)
        if sel is None:
            g += weight_decay * params.values
        else:
            g[sel] += weight_decay * params.values[sel]
    return lb, g, batch_stats


def grad(
    params: ParamVector,
    inputs,
    labels,
    weight_decay: float = 0.0,
    mode: str = "train",
    bn_stats: BatchNormStats | None = None,
    l2_scope: str = "weights",
) -> ParamVector:
    """Gradient of ``loss(...).total`` with respect to every parameter."""
    _, g, _ = loss_and_grad(params, inputs, labels, weight_decay, mode, bn_stats, l2_scope)
    return ParamVector(g, params.layout)
