"""Forward passes over a layered chain graph.

Feed-forward propagates expected features ``q = g(e(q_parents))``.  The
stochastic passes replace some of those expectations by samples:

* forward (ancestral) sampling samples every non-input node,
* PCFF samples each node with probability ``rate`` and collapses the rest,
* dropout training gates each annotated node's outgoing terms by ``d ~ Bernoulli(p)``.

All passes share one engine, :func:`forward`.  A :class:`StochasticMask`
records every random decision so a pass can be replayed exactly, which is
what backpropagation and gradient checks rely on.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .graph import GraphError, LayeredChainGraph, as_batch, check, preactivation_batch


class UnsupportedStructure(GraphError):
    """Graph outside the class handled by the exact enumeration oracle."""


@dataclass
class StochasticMask:
    """Random decisions of one pass, all arrays shaped ``(B, N)``."""

    sampled: dict = field(default_factory=dict)
    noise: dict = field(default_factory=dict)
    dropout: dict = field(default_factory=dict)

    def n_sampled(self) -> int:
        return int(sum(v.sum() for v in self.sampled.values()))


@dataclass
class ActivationState:
    """Per-layer features ``q`` and preactivations ``e``, shaped ``(B, N, d)``."""

    graph: LayeredChainGraph
    q: dict
    e: dict
    gate: dict
    batched: bool = True
    mask: Optional[StochasticMask] = None

    def flat(self, layer_id) -> np.ndarray:
        q = self.q[layer_id]
        q = q.reshape(q.shape[0], -1)
        return q if self.batched else q[0]

    @property
    def output(self) -> np.ndarray:
        return self.flat(self.graph.output)

    @property
    def input(self) -> dict:
        return {l.id: self.q[l.id] for l in self.graph.inputs}


def split_inputs(graph: LayeredChainGraph, x):
    """Map user input to ``{input id: (B, N, d)}``; also report batchedness."""
    inputs = graph.inputs
    if isinstance(x, dict):
        batched = any(np.ndim(v) > 1 for v in x.values())
        return {l.id: as_batch(l, x[l.id]) for l in inputs}, batched
    x = np.asarray(x, dtype=float)
    batched = x.ndim > 1
    x2 = x if batched else x[None]
    if x2.shape[-1] != graph.input_width:
        raise GraphError(f"input width {x2.shape[-1]} != {graph.input_width}")
    out, start = {}, 0
    for l in inputs:
        out[l.id] = as_batch(l, x2[:, start:start + l.width])
        start += l.width
    return out, batched


def forward(
    graph: LayeredChainGraph,
    x,
    *,
    dropout: str = "off",
    rate: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    mask: Optional[StochasticMask] = None,
    exclude=(),
) -> ActivationState:
    """Run one pass.

    ``dropout`` is ``"off"``, ``"test"`` (scale by ``p``) or ``"train"``
    (sample gates).  ``rate`` is the PCFF sampling rate.  Passing ``mask``
    replays recorded decisions instead of drawing new ones; layers in
    ``exclude`` are never sampled.
    """
    if dropout not in ("off", "test", "train"):
        raise ValueError(f"unknown dropout mode {dropout!r}")
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"sample rate {rate} outside [0, 1]")
    replay = mask is not None
    if not replay:
        mask = StochasticMask()
        if (rate > 0 or dropout == "train") and rng is None:
            raise ValueError("stochastic pass needs an rng")

    q, batched = split_inputs(graph, x)
    B = next(iter(q.values())).shape[0]
    e, gate, q_eff = {}, {}, {}
    for layer in graph.layers:
        lid = layer.id
        if not layer.is_input:
            pre = preactivation_batch(graph, lid, q_eff)
            e[lid] = pre
            qi = layer.dist.mean(pre)
            if replay:
                flags = mask.sampled.get(lid)
            elif rate > 0 and lid not in exclude:
                flags = rng.random((B, layer.size)) < rate
                mask.sampled[lid] = flags
            else:
                flags = None
            if flags is not None and flags.any():
                qi = _sample_nodes(layer, pre, qi, flags, mask, replay, rng)
            q[lid] = qi
        p = graph.dropout.get(lid)
        if p is None or dropout == "off":
            g = None
        elif dropout == "test":
            g = p
        elif replay and lid in mask.dropout:
            g = mask.dropout[lid][..., None]
        elif replay:
            g = None
        else:
            d = (rng.random((B, layer.size)) < p).astype(float)
            mask.dropout[lid] = d
            g = d[..., None]
        gate[lid] = g
        q_eff[lid] = q[lid] if g is None else q[lid] * g
    return ActivationState(graph, q, e, gate, batched, mask)


def _sample_nodes(layer, pre, qi, flags, mask, replay, rng):
    dist = layer.dist
    if dist.discrete:
        if replay and layer.id in mask.noise:
            # replayed discrete samples are stored as features
            feats = mask.noise[layer.id]
        else:
            feats = dist.features(dist.sample(pre, rng))
            mask.noise[layer.id] = feats
        return np.where(flags[..., None], feats, qi)
    if replay:
        z = mask.noise[layer.id]
    else:
        z = rng.standard_normal(flags.shape)
        mask.noise[layer.id] = z
    x, _ = dist.reparam(pre[..., 0], z)
    return np.where(flags[..., None], x[..., None], qi)


def feed_forward(graph: LayeredChainGraph, x, dropout_mode: str = "off") -> ActivationState:
    """Deterministic expected-feature pass; ``dropout_mode`` is ``"off"`` or ``"test"``."""
    if dropout_mode not in ("off", "test"):
        raise ValueError("feed_forward takes dropout_mode 'off' or 'test'")
    return forward(graph, x, dropout=dropout_mode)


def forward_sample(graph: LayeredChainGraph, x, rng, noise: Optional[dict] = None) -> ActivationState:
    """Ancestral sample of every non-input node given the input.

    Continuous nodes use the reparameterized sampler; ``noise`` optionally
    freezes their standard normal draws (``{layer id: (B, N)}``).
    """
    if noise is None:
        return forward(graph, x, rate=1.0, rng=rng)
    inputs, _ = split_inputs(graph, x)
    B = next(iter(inputs.values())).shape[0]
    mask = StochasticMask()
    for layer in graph.layers:
        if layer.is_input:
            continue
        mask.sampled[layer.id] = np.ones((B, layer.size), dtype=bool)
        if layer.dist.discrete:
            raise ValueError("frozen noise only applies to continuous layers")
        mask.noise[layer.id] = np.broadcast_to(noise[layer.id], (B, layer.size))
    return forward(graph, x, rate=1.0, mask=mask)


def pcff_forward(graph, x, rate, rng, mask=None, exclude=(), dropout="off"):
    """Partially collapsed feed-forward; returns ``(state, mask)``."""
    state = forward(graph, x, rate=rate, rng=rng, mask=mask, exclude=exclude, dropout=dropout)
    return state, state.mask


def dropout_forward_train(graph, x, rng, mask=None):
    """Feed-forward with freshly sampled dropout gates; returns ``(state, mask)``."""
    state = forward(graph, x, dropout="train", rng=rng, mask=mask)
    return state, state.mask


# -- exact enumeration oracle ---------------------------------------------------


@dataclass
class MarginalReport:
    """Exact node marginals next to feed-forward estimates, per non-input layer."""

    tables: dict
    joint: dict
    exact_mean: dict
    ff_mean: dict
    error: dict

    @property
    def max_error(self) -> float:
        return max(float(v.max()) for v in self.error.values())


MAX_STATES = 2 ** 20


def _configs(n_states, size):
    """All joint state indices of a layer, node 0 most significant."""
    return np.array(list(itertools.product(range(n_states), repeat=size)), dtype=np.int64)


def exact_marginals(graph: LayeredChainGraph, x, chunk_elems: int = 1 << 22) -> MarginalReport:
    """Exact marginals ``Q(x^l | x^1)`` by propagating layer joints.

    Supports sequential graphs (one input layer; each other layer's only
    parent is its predecessor) with discrete nodes and at most ``2**20``
    joint states per layer.  The input is conditioned on, as given.
    """
    check(graph)
    layers = graph.layers
    if graph.dropout:
        raise UnsupportedStructure("dropout annotations are not enumerated")
    if not layers[0].is_input or any(l.is_input for l in layers[1:]):
        raise UnsupportedStructure("exactly one input layer, placed first, is required")
    for prev, layer in zip(layers, layers[1:]):
        conns = graph.parents(layer.id)
        if len(conns) != 1 or conns[0].parent != prev.id:
            raise UnsupportedStructure(f"layer {layer.id!r} is not fed by its predecessor only")
        if not layer.dist.discrete:
            raise UnsupportedStructure(f"layer {layer.id!r} is continuous")
        if layer.dist.n_states ** layer.size > MAX_STATES:
            raise UnsupportedStructure(f"layer {layer.id!r} has too many joint states")
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("exact_marginals takes a single input vector")

    ff = feed_forward(graph, x)
    parent_feats = as_batch(layers[0], x)  # (K=1, N, d)
    parent_prob = np.ones(1)
    report = MarginalReport({}, {}, {}, {}, {})
    for prev, layer in zip(layers, layers[1:]):
        dist = layer.dist
        k, n = dist.n_states, layer.size
        cfg = _configs(k, n)
        joint = np.zeros(len(cfg))
        step = max(1, chunk_elems // len(cfg))
        for s in range(0, len(parent_prob), step):
            pe = preactivation_batch(graph, layer.id, {prev.id: parent_feats[s:s + step]})
            node_p = np.exp(dist.log_prob_states(pe))  # (chunk, N, k)
            acc = np.ones((len(pe), 1))
            for i in range(n):
                acc = (acc[:, :, None] * node_p[:, i, None, :]).reshape(len(pe), -1)
            joint += parent_prob[s:s + step] @ acc
        tables = np.stack([np.bincount(cfg[:, i], weights=joint, minlength=k) for i in range(n)])
        state_feats = dist.features(dist.states())  # (k, d)
        mean = tables @ state_feats
        report.tables[layer.id] = tables
        report.joint[layer.id] = joint
        report.exact_mean[layer.id] = mean
        report.ff_mean[layer.id] = ff.q[layer.id][0]
        report.error[layer.id] = np.abs(mean - ff.q[layer.id][0]).max(axis=-1)
        parent_feats = state_feats[cfg]  # (K, N, d)
        parent_prob = joint
    return report
