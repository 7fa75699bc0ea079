"""Losses, backpropagation through (partially) stochastic passes, SGD training."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import Dataset, split
from .graph import GraphError, LayeredChainGraph, as_batch
from .distributions import Binary, Multilabel
from .inference import ActivationState, StochasticMask, forward

log = logging.getLogger(__name__)

CROSS_ENTROPY = "cross_entropy"
SQUARED_ERROR = "squared_error"
LOSSES = (CROSS_ENTROPY, SQUARED_ERROR)


# -- losses -------------------------------------------------------------------


def _log_softmax(e):
    m = e.max(axis=-1, keepdims=True)
    return e - m - np.log(np.exp(e - m).sum(axis=-1, keepdims=True))


def _labels(target, n_nodes):
    t = np.asarray(target)
    if t.ndim == 0:
        t = t[None]
    if n_nodes == 1 and t.ndim == 1:
        t = t[:, None]
    return t.astype(int)


def loss_eval(spec: str, q, target, e=None) -> float:
    """Batch-mean loss of output features ``q`` (flat or ``(B, N, d)``).

    Cross-entropy takes integer class targets (0-based) and uses the
    output preactivation ``e`` through log-sum-exp when given.  Squared
    error takes a target of the same shape as ``q``.
    """
    if spec == CROSS_ENTROPY:
        src = e if e is not None else q
        src = np.asarray(src, dtype=float)
        if src.ndim == 1:
            src = src[None, None]
        elif src.ndim == 2:
            src = src[:, None]
        t = _labels(target, src.shape[1])
        c = src.shape[-1]
        if np.any(t >= c) or np.any(t < 0):
            raise ValueError(f"target label outside 0..{c - 1}")
        if e is not None:
            picked = np.take_along_axis(_log_softmax(src), t[..., None], axis=-1)[..., 0]
        else:
            with np.errstate(divide="ignore"):
                picked = np.log(np.take_along_axis(src, t[..., None], axis=-1)[..., 0])
        return float(-picked.sum(axis=-1).mean())
    if spec == SQUARED_ERROR:
        q = np.asarray(q, dtype=float)
        diff = q - np.asarray(target, dtype=float).reshape(q.shape)
        if diff.ndim == 1:
            return float((diff ** 2).sum())
        return float((diff.reshape(len(diff), -1) ** 2).sum(axis=1).mean())
    raise ValueError(f"unknown loss {spec!r}")


def loss_and_grad(spec: str, state: ActivationState, target):
    """Loss on the output layer and the gradient that seeds :func:`backward`.

    Returns ``(loss, grad_q, grad_e)`` with exactly one gradient set.
    Cross-entropy is fused with the softmax so the gradient goes straight
    to the output preactivation.
    """
    out = state.graph.layer(state.graph.output)
    q, e = state.q[out.id], state.e[out.id]
    B = len(q)
    if spec == CROSS_ENTROPY:
        if not isinstance(out.dist, Multilabel):
            raise GraphError("cross-entropy needs a multilabel output layer")
        t = _labels(target, out.size)
        loss = loss_eval(spec, None, t, e=e)
        grad = np.exp(_log_softmax(e))
        np.put_along_axis(grad, t[..., None], np.take_along_axis(grad, t[..., None], -1) - 1.0, -1)
        return loss, None, grad / B
    if spec == SQUARED_ERROR:
        tgt = np.asarray(target, dtype=float).reshape(q.shape)
        return loss_eval(spec, q, tgt), 2.0 * (q - tgt) / B, None
    raise ValueError(f"unknown loss {spec!r}")


# -- backward -----------------------------------------------------------------


def backward(graph: LayeredChainGraph, state: ActivationState, mask: Optional[StochasticMask] = None,
             grad_q=None, grad_e=None) -> dict:
    """Gradients of a scalar loss w.r.t. every parameter key.

    ``grad_q`` is the loss gradient at the output features, or ``grad_e`` at
    the output preactivation.  Collapsed nodes differentiate through the
    activation, sampled continuous nodes through the recorded-noise pathwise
    derivative, sampled discrete nodes stop the gradient.  Dropout gates are
    constants; tied parameters accumulate into one array.
    """
    if set(state.e) != {l.id for l in graph.layers if not l.is_input}:
        raise GraphError("activation state does not belong to this graph")
    mask = mask if mask is not None else state.mask
    out = graph.layer(graph.output)
    grads = graph.params.zeros_like()
    dq = {}
    if grad_q is not None:
        dq[out.id] = as_batch(out, grad_q)
    for layer in reversed(graph.layers):
        if layer.is_input:
            continue
        lid = layer.id
        e = state.e[lid]
        de = None
        if lid in dq:
            flags = mask.sampled.get(lid) if mask is not None else None
            if flags is None or not flags.any():
                de = layer.dist.vjp(e, dq[lid], state.q[lid])
            else:
                de = layer.dist.vjp(e, dq[lid])
                if layer.dist.discrete:
                    de = np.where(flags[..., None], 0.0, de)
                else:
                    _, dx = layer.dist.reparam(e[..., 0], mask.noise[lid])
                    de = np.where(flags[..., None], (dx * dq[lid][..., 0])[..., None], de)
        if lid == out.id and grad_e is not None:
            ge = as_batch(out, grad_e)
            de = ge if de is None else de + ge
        if de is None:
            continue
        for key in layer.bias:
            grads[key] += de.sum(axis=0)
        B = len(de)
        de_flat = de.reshape(B, -1)
        for conn in graph.parents(lid):
            q_p = state.q[conn.parent]
            gate = state.gate.get(conn.parent)
            q_eff = q_p if gate is None else q_p * gate
            w = graph.weight(conn)
            if conn.pattern == "diagonal":
                grads[conn.key] += np.einsum("bnp,bnc->npc", q_eff, de)
                back = np.einsum("bnc,npc->bnp", de, w)
            else:
                g = q_eff.reshape(B, -1).T @ de_flat
                if conn.key in graph.params.masks:
                    g = g * graph.params.masks[conn.key]
                grads[conn.key] += g
                back = (de_flat @ w.T).reshape(q_p.shape)
            if gate is not None:
                back = back * gate
            parent = graph.layer(conn.parent)
            if not parent.is_input:
                dq[conn.parent] = dq[conn.parent] + back if conn.parent in dq else back
    for key in graph.params.frozen:
        grads[key][...] = 0.0
    return grads


# -- optimizer ----------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 0.01
    momentum: float = 0.9
    velocity: dict = field(default_factory=dict)


def sgd_step(params, grads: dict, opt: OptimizerState):
    """``v <- momentum * v + g``; ``theta <- theta - lr * v``, in place."""
    for key, g in grads.items():
        if key not in params:
            raise GraphError(f"gradient for unknown parameter {key!r}")
        theta = params[key]
        if g.shape != theta.shape:
            raise GraphError(f"gradient shape {g.shape} != parameter shape {theta.shape} for {key!r}")
        if not params.trainable(key):
            continue
        v = opt.velocity.get(key)
        v = g.copy() if v is None else opt.momentum * v + g
        if key in params.masks:
            v = v * params.masks[key]
        opt.velocity[key] = v
        theta -= opt.lr * v
    return params, opt


# -- train / evaluate ---------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    val_fraction: float = 0.2
    patience: int = 10
    seed: int = 0
    mode: str = "ff"  # "ff" | "dropout" | "pcff"
    sample_rate: float = 0.0
    loss: str = CROSS_ENTROPY

    def __post_init__(self):
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.mode not in ("ff", "dropout", "pcff"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if not 0.0 <= self.sample_rate <= 1.0:
            raise ValueError("sample_rate must lie in [0, 1]")


def _targets(graph, spec, y):
    if spec == CROSS_ENTROPY:
        return y
    out = graph.layer(graph.output)
    if y.ndim == 1 and out.width > 1:
        return np.eye(out.width)[y]
    return y.reshape(len(y), -1).astype(float)


def _predict(graph, q):
    out = graph.layer(graph.output)
    if out.width == 1:
        d = out.dist
        mid = 0.5 * (d.alpha + d.beta) if isinstance(d, Binary) else 0.5
        return (q[:, 0] > mid).astype(int)
    return np.argmax(q, axis=1)


def evaluate(graph: LayeredChainGraph, dataset: Dataset, loss: str = CROSS_ENTROPY,
             batch_size: int = 1000) -> dict:
    """Mean loss and classification error under test-mode feed-forward."""
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    total, wrong = 0.0, 0
    for s in range(0, n, batch_size):
        X, y = dataset.X[s:s + batch_size], dataset.y[s:s + batch_size]
        state = forward(graph, X, dropout="test")
        out = graph.output
        total += len(X) * loss_eval(loss, state.q[out], _targets(graph, loss, y), e=state.e[out])
        wrong += int((_predict(graph, state.flat(out)) != y).sum())
    return {"loss": total / n, "error": wrong / n}


def train_step(graph, X, target, config: TrainConfig, opt: OptimizerState, rng):
    if config.mode == "pcff":
        state = forward(graph, X, rate=config.sample_rate, rng=rng, exclude={graph.output}, dropout="test")
    elif config.mode == "dropout":
        state = forward(graph, X, dropout="train", rng=rng)
    else:
        state = forward(graph, X, dropout="test")
    loss, gq, ge = loss_and_grad(config.loss, state, target)
    grads = backward(graph, state, grad_q=gq, grad_e=ge)
    sgd_step(graph.params, grads, opt)
    return loss


def train(graph: LayeredChainGraph, dataset: Dataset, config: TrainConfig):
    """Train in place; return ``(params, history)``.

    Every random choice (split, shuffling, masks, noise) derives from
    ``config.seed``, so a run is bitwise reproducible.  With a validation
    split, the parameters with the lowest validation loss are restored at
    the end and training stops after ``patience`` epochs without improvement.
    """
    if config.mode == "dropout" and not graph.dropout:
        raise ValueError("dropout mode needs a graph with dropout annotations")
    train_set, val_set = split(dataset, config.val_fraction, config.seed)
    if len(train_set) == 0:
        raise ValueError("empty training split")
    opt = OptimizerState(config.lr, config.momentum)
    history = []
    best_loss, best_params, stale = np.inf, None, 0
    targets = _targets(graph, config.loss, train_set.y)
    n = len(train_set)
    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng([config.seed, 1, epoch]).permutation(n)
        for b, s in enumerate(range(0, n, config.batch_size)):
            idx = order[s:s + config.batch_size]
            rng = np.random.default_rng([config.seed, 2, epoch, b])
            train_step(graph, train_set.X[idx], targets[idx], config, opt, rng)
        tr = evaluate(graph, train_set, config.loss)
        row = {"epoch": epoch, "train_loss": tr["loss"], "train_err": tr["error"],
               "val_loss": np.nan, "val_err": np.nan}
        if len(val_set):
            va = evaluate(graph, val_set, config.loss)
            row["val_loss"], row["val_err"] = va["loss"], va["error"]
        history.append(row)
        log.info("epoch %d train_loss %.4f train_err %.4f val_loss %.4f val_err %.4f",
                 epoch, row["train_loss"], row["train_err"], row["val_loss"], row["val_err"])
        if len(val_set):
            if row["val_loss"] < best_loss:
                best_loss, stale = row["val_loss"], 0
                best_params = {k: v.copy() for k, v in graph.params.items()}
            else:
                stale += 1
                if stale >= config.patience:
                    break
    if best_params is not None:
        for k, v in best_params.items():
            graph.params[k] = v
    return graph.params, history
