"""Layered chain graphs: layers, connections, parameters and builders.

Layers are kept in topological order.  Every layer owns a per-node
distribution; every connection carries pairwise weights stored under a
parameter key, and connections (or biases) that share a key are tied.

Storage conventions, with ``d`` the feature dimension of a layer:

* dense / masked weights: ``(N_parent * d_parent, N_child * d_child)``; the
  block for node pair ``(j, i)`` is ``W[j*dp:(j+1)*dp, i*dc:(i+1)*dc]``
* diagonal weights: ``(N, d_parent, d_child)``
* biases: ``(N, d)``
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from . import distributions as dists
from .distributions import NodeDistribution

PATTERNS = ("dense", "diagonal", "masked")


class GraphError(ValueError):
    """Structural or shape contract violated."""


@dataclass
class Layer:
    id: str
    size: int
    dist: NodeDistribution
    is_input: bool = False
    bias: tuple = ()

    @property
    def dim(self) -> int:
        return self.dist.feature_dim

    @property
    def width(self) -> int:
        """Flat width ``N * d`` of the layer's feature vector."""
        return self.size * self.dim


@dataclass
class Connection:
    parent: str
    child: str
    pattern: str = "dense"
    mask: Optional[np.ndarray] = None
    tie_group: Optional[str] = None
    trainable: bool = True

    @property
    def key(self) -> str:
        return self.tie_group or f"W:{self.parent}->{self.child}"


@dataclass
class ParameterStore:
    """Named parameter arrays.  Tied members reference one array."""

    arrays: dict = field(default_factory=dict)
    frozen: set = field(default_factory=set)
    masks: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.arrays[key]

    def __setitem__(self, key, value):
        value = np.asarray(value, dtype=float)
        if key in self.arrays:
            if self.arrays[key].shape != value.shape:
                raise GraphError(f"shape mismatch for parameter {key!r}")
            self.arrays[key][...] = value
        else:
            self.arrays[key] = value.copy()

    def __contains__(self, key):
        return key in self.arrays

    def __iter__(self):
        return iter(self.arrays)

    def keys(self):
        return self.arrays.keys()

    def items(self):
        return self.arrays.items()

    def trainable(self, key) -> bool:
        return key not in self.frozen

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def copy(self) -> "ParameterStore":
        return ParameterStore(
            {k: v.copy() for k, v in self.arrays.items()},
            set(self.frozen),
            {k: v.copy() for k, v in self.masks.items()},
        )

    def zeros_like(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}


def _weight_shape(pattern, parent: Layer, child: Layer):
    if pattern == "diagonal":
        return (child.size, parent.dim, child.dim)
    return (parent.width, child.width)


class LayeredChainGraph:
    """A layered chain graph with its parameter store.

    >>> from chaingraph.distributions import Binary, Multilabel
    >>> g = LayeredChainGraph()
    >>> _ = g.add_layer("x", 4, Binary(), is_input=True)
    >>> _ = g.add_layer("y", 1, Multilabel(3))
    >>> _ = g.connect("x", "y")
    >>> g.params["W:x->y"].shape
    (4, 3)
    """

    def __init__(self):
        self.layers: list[Layer] = []
        self.connections: list[Connection] = []
        self.params = ParameterStore()
        self.dropout: dict[str, float] = {}
        self._output: Optional[str] = None

    # -- construction -----------------------------------------------------

    def add_layer(self, id, size, dist, is_input=False, bias=True):
        """Append a layer.  ``bias`` is True (own bias), False, or key(s) to tie to."""
        if any(l.id == id for l in self.layers):
            raise GraphError(f"duplicate layer id {id!r}")
        if bias is True:
            keys = () if is_input else (f"b:{id}",)
        elif bias is False or bias is None:
            keys = ()
        elif isinstance(bias, str):
            keys = (bias,)
        else:
            keys = tuple(bias)
        layer = Layer(id, int(size), dist, bool(is_input), keys)
        self.layers.append(layer)
        for key in keys:
            self._alloc(key, (layer.size, layer.dim))
        return self

    def connect(self, parent, child, pattern="dense", mask=None, tie_group=None, trainable=True):
        if pattern not in PATTERNS:
            raise GraphError(f"unknown connection pattern {pattern!r}")
        p, c = self.layer(parent), self.layer(child)
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
        conn = Connection(parent, child, pattern, mask, tie_group, trainable)
        self.connections.append(conn)
        if pattern == "diagonal" and p.size != c.size:
            # leave allocation to validate(); the shape is undefined
            return self
        self._alloc(conn.key, _weight_shape(pattern, p, c))
        if not trainable:
            self.params.frozen.add(conn.key)
        if pattern == "masked" and mask is not None and mask.shape == (p.size, c.size):
            self.params.masks[conn.key] = np.kron(mask, np.ones((p.dim, c.dim), dtype=bool))
        return self

    def _alloc(self, key, shape):
        if key in self.params:
            if self.params[key].shape != tuple(shape):
                raise GraphError(f"tied parameter {key!r} used with incompatible shapes")
        else:
            self.params.arrays[key] = np.zeros(shape)

    # -- queries ------------------------------------------------------------

    def layer(self, id) -> Layer:
        for l in self.layers:
            if l.id == id:
                return l
        raise GraphError(f"no layer {id!r}")

    def index(self, id) -> int:
        for i, l in enumerate(self.layers):
            if l.id == id:
                return i
        raise GraphError(f"no layer {id!r}")

    def parents(self, id) -> list[Connection]:
        return [c for c in self.connections if c.child == id]

    def children(self, id) -> list[Connection]:
        return [c for c in self.connections if c.parent == id]

    @property
    def inputs(self) -> list[Layer]:
        return [l for l in self.layers if l.is_input]

    @property
    def input_width(self) -> int:
        return sum(l.width for l in self.inputs)

    @property
    def output(self) -> str:
        if self._output is not None:
            return self._output
        return self.layers[-1].id

    @output.setter
    def output(self, id):
        self.layer(id)
        self._output = id

    def weight(self, conn: Connection) -> np.ndarray:
        """Effective weight of ``conn`` (masked entries zeroed)."""
        w = self.params[conn.key]
        if conn.pattern == "masked" and conn.key in self.params.masks:
            return w * self.params.masks[conn.key]
        return w

    def bias(self, layer: Layer) -> np.ndarray:
        out = np.zeros((layer.size, layer.dim))
        for key in layer.bias:
            out = out + self.params[key]
        return out

    def copy(self, share_params=False) -> "LayeredChainGraph":
        g = LayeredChainGraph()
        g.layers = [copy.copy(l) for l in self.layers]
        g.connections = [copy.copy(c) for c in self.connections]
        g.params = self.params if share_params else self.params.copy()
        g.dropout = dict(self.dropout)
        g._output = self._output
        return g

    def __repr__(self):
        sizes = "-".join(str(l.size) for l in self.layers)
        return f"LayeredChainGraph({sizes}, {len(self.connections)} connections)"

    # -- serialization ------------------------------------------------------

    def to_dict(self, include_params=True) -> dict:
        out = {
            "layers": [
                {"id": l.id, "size": l.size, "dist": dists.to_dict(l.dist),
                 "input": l.is_input, "bias": list(l.bias)}
                for l in self.layers
            ],
            "connections": [],
            "dropout": dict(self.dropout),
            "output": self.output if self.layers else None,
        }
        for c in self.connections:
            d = {"parent": c.parent, "child": c.child, "pattern": c.pattern,
                 "tie_group": c.tie_group, "trainable": c.trainable}
            if c.mask is not None:
                d["mask"] = c.mask.astype(int).tolist()
            out["connections"].append(d)
        if include_params:
            out["params"] = {k: {"shape": list(v.shape), "values": v.ravel().tolist()}
                             for k, v in self.params.items()}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "LayeredChainGraph":
        g = cls()
        for l in d["layers"]:
            g.add_layer(l["id"], l["size"], dists.from_dict(l["dist"]),
                        is_input=l.get("input", False), bias=l.get("bias", True))
        for c in d.get("connections", []):
            g.connect(c["parent"], c["child"], c.get("pattern", "dense"), c.get("mask"),
                      c.get("tie_group"), c.get("trainable", True))
        g.dropout = {k: float(v) for k, v in d.get("dropout", {}).items()}
        if d.get("output") is not None:
            g.output = d["output"]
        for key, p in d.get("params", {}).items():
            g.params[key] = np.asarray(p["values"], dtype=float).reshape(p["shape"])
        return g


def validate(graph: LayeredChainGraph) -> list[str]:
    """Return every violated structural invariant; an empty list means ok."""
    problems = []
    ids = [l.id for l in graph.layers]
    if len(set(ids)) != len(ids):
        problems.append("duplicate layer ids")
    pos = {l.id: i for i, l in enumerate(graph.layers)}
    for l in graph.layers:
        if l.size < 1:
            problems.append(f"layer {l.id!r}: size must be >= 1")
        has_parent = any(c.child == l.id for c in graph.connections)
        if l.is_input and has_parent:
            problems.append(f"input layer {l.id!r} has parent connections")
        if not l.is_input and not has_parent:
            problems.append(f"layer {l.id!r} has no parents")
    trainable = {}
    for c in graph.connections:
        tag = f"connection {c.parent!r}->{c.child!r}"
        if c.parent not in pos or c.child not in pos:
            problems.append(f"{tag}: unknown layer")
            continue
        if pos[c.parent] >= pos[c.child]:
            problems.append(f"{tag}: cycle, parent does not precede child in topological order")
        p, ch = graph.layer(c.parent), graph.layer(c.child)
        if c.pattern == "diagonal" and p.size != ch.size:
            problems.append(f"{tag}: diagonal pattern needs equal sizes, got {p.size} and {ch.size}")
            continue
        if c.pattern == "masked":
            if c.mask is None or c.mask.shape != (p.size, ch.size):
                problems.append(f"{tag}: mask must have shape ({p.size}, {ch.size})")
        if c.pattern not in PATTERNS:
            problems.append(f"{tag}: unknown pattern {c.pattern!r}")
        want = _weight_shape(c.pattern, p, ch)
        if c.key not in graph.params or graph.params[c.key].shape != want:
            problems.append(f"{tag}: parameter {c.key!r} missing or not of shape {want}")
        if trainable.setdefault(c.key, c.trainable) != c.trainable:
            problems.append(f"tie group {c.key!r} mixes trainable and fixed connections")
    for l in graph.layers:
        for key in l.bias:
            if key not in graph.params or graph.params[key].shape != (l.size, l.dim):
                problems.append(f"layer {l.id!r}: bias {key!r} missing or misshapen")
    for id, p in graph.dropout.items():
        if id not in pos:
            problems.append(f"dropout on unknown layer {id!r}")
        elif not 0.0 < p <= 1.0:
            problems.append(f"dropout on {id!r}: keep probability {p} outside (0, 1]")
    if graph.layers and graph.output in graph.dropout:
        problems.append("dropout annotation on the output layer")
    return problems


def check(graph: LayeredChainGraph) -> LayeredChainGraph:
    problems = validate(graph)
    if problems:
        raise GraphError("; ".join(problems))
    return graph


# -- feature layout helpers ------------------------------------------------


def as_batch(layer: Layer, q) -> np.ndarray:
    """Reshape flat ``(B, N*d)`` / ``(N*d,)`` features to ``(B, N, d)``."""
    q = np.asarray(q, dtype=float)
    if q.ndim == 3:
        if q.shape[1:] != (layer.size, layer.dim):
            raise GraphError(f"layer {layer.id!r}: expected (B, {layer.size}, {layer.dim})")
        return q
    if q.ndim == 1:
        q = q[None]
    if q.shape[-1] != layer.width:
        raise GraphError(f"layer {layer.id!r}: expected width {layer.width}, got {q.shape[-1]}")
    return q.reshape(q.shape[0], layer.size, layer.dim)


def contribution(graph, conn: Connection, q_parent: np.ndarray) -> np.ndarray:
    """Pairwise term of ``conn`` for parent features ``(B, Np, dp)``."""
    child = graph.layer(conn.child)
    w = graph.weight(conn)
    if conn.pattern == "diagonal":
        return np.einsum("bnp,npc->bnc", q_parent, w)
    flat = q_parent.reshape(q_parent.shape[0], -1) @ w
    return flat.reshape(-1, child.size, child.dim)


def preactivation_batch(graph, layer_id, q_eff: dict) -> np.ndarray:
    layer = graph.layer(layer_id)
    e = graph.bias(layer)[None]
    for conn in graph.parents(layer_id):
        if conn.parent not in q_eff:
            raise GraphError(f"missing activations of parent {conn.parent!r} for {layer_id!r}")
        e = e + contribution(graph, conn, q_eff[conn.parent])
    return e


def preactivation(graph: LayeredChainGraph, layer_id, parent_activations: dict) -> np.ndarray:
    """Preactivation ``e = b + sum_p sum_j W_ji q_j`` of a layer.

    ``parent_activations`` maps parent ids to flat feature arrays; the
    result is flat too, ``(B, N*d)`` or ``(N*d,)`` for unbatched input.
    """
    single = all(np.ndim(v) == 1 for v in parent_activations.values())
    q = {k: as_batch(graph.layer(k), v) for k, v in parent_activations.items()}
    e = preactivation_batch(graph, layer_id, q)
    e = e.reshape(e.shape[0], -1)
    return e[0] if single else e


# -- parameter initialization -----------------------------------------------


def fan_in(graph: LayeredChainGraph, layer_id) -> int:
    total = 0
    for c in graph.parents(layer_id):
        p = graph.layer(c.parent)
        total += p.dim if c.pattern == "diagonal" else p.width
    return max(total, 1)


def init_params(graph: LayeredChainGraph, scheme="normal", seed=0, gain=1.0) -> ParameterStore:
    """Initialize parameters in place and return the store.

    Biases start at zero.  ``"normal"`` draws weights from
    ``N(0, (gain / sqrt(fan_in))^2)``, once per tie group, in key order of
    first use; ``"zeros"`` zeroes everything.
    """
    if scheme not in ("normal", "zeros"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    for arr in graph.params.arrays.values():
        arr[...] = 0.0
    if scheme == "zeros":
        return graph.params
    done = set()
    for c in graph.connections:
        if c.key in done:
            continue
        done.add(c.key)
        w = graph.params[c.key]
        w[...] = rng.normal(0.0, gain / np.sqrt(fan_in(graph, c.child)), size=w.shape)
        if c.key in graph.params.masks:
            w *= graph.params.masks[c.key]
    return graph.params


# -- builders ----------------------------------------------------------------


def sequential(sizes: Iterable[int], hidden, output=None, input_dist=None, prefix="h"):
    """Dense feed-forward graph ``x -> h1 -> ... -> y``.

    ``sizes`` lists layer sizes including input and output; ``hidden`` is the
    distribution of the hidden layers and ``output`` (default ``hidden``) of
    the last one.
    """
    sizes = list(sizes)
    g = LayeredChainGraph()
    g.add_layer("x", sizes[0], input_dist or dists.Binary(0.0, 1.0), is_input=True)
    prev = "x"
    for k, n in enumerate(sizes[1:-1], 1):
        g.add_layer(f"{prefix}{k}", n, hidden)
        g.connect(prev, f"{prefix}{k}")
        prev = f"{prefix}{k}"
    g.add_layer("y", sizes[-1], output or hidden)
    g.connect(prev, "y")
    return g


def _merge_params(dst: ParameterStore, src: ParameterStore):
    for k, v in src.arrays.items():
        if k in dst.arrays and dst.arrays[k] is not v:
            raise GraphError(f"parameter key {k!r} defined in both subgraphs")
        dst.arrays[k] = v
    dst.frozen |= src.frozen
    dst.masks.update(src.masks)


def _fresh_id(taken, base):
    cand = base
    while cand in taken:
        cand += "~"
    return cand


def build_refinement(base: LayeredChainGraph, refining: LayeredChainGraph) -> LayeredChainGraph:
    """Refinement module around ``base`` (``X^{l-1} -> X^l``).

    A weight-tied copy of ``base`` feeds a duplicated layer ``X~^l``; the
    ``refining`` subgraph runs from ``X~^l`` into ``X^l``.  The preactivation
    of ``X^l`` sums both branches, so feed-forward computes
    ``g(e_m(q) + e_r(g(e_m(q))))``, a preactivation residual block.

    The returned fragment shares parameter arrays with both arguments.
    """
    check(base)
    check(refining)
    if len(base.inputs) != 1 or len(refining.inputs) != 1:
        raise GraphError("base and refining subgraphs need exactly one input layer")
    x_in, x_out = base.inputs[0], base.layer(base.output)
    r_in, r_out = refining.inputs[0], refining.layer(refining.output)
    for a, b, what in ((x_out, r_out, "refining output"), (x_out, r_in, "refining input")):
        if a.size != b.size or a.dist != b.dist:
            raise GraphError(f"{what} must match the base output in size and distribution")

    taken = {l.id for l in base.layers}
    rename = {x_in.id: x_in.id}
    for l in base.layers:
        if not l.is_input:
            rename[l.id] = _fresh_id(taken, l.id + "~")
            taken.add(rename[l.id])
    r_map = {r_in.id: rename[x_out.id], r_out.id: x_out.id}
    for l in refining.layers:
        if l.id not in r_map:
            if l.id in taken:
                raise GraphError(f"refining layer id {l.id!r} collides with the base")
            r_map[l.id] = l.id
            taken.add(l.id)

    g = LayeredChainGraph()
    _merge_params(g.params, base.params)
    _merge_params(g.params, refining.params)
    g.add_layer(x_in.id, x_in.size, x_in.dist, is_input=True, bias=x_in.bias)
    for l in base.layers:
        if not l.is_input:
            g.add_layer(rename[l.id], l.size, l.dist, bias=l.bias)
    for l in refining.layers:
        if not l.is_input and l.id != r_out.id:
            g.add_layer(l.id, l.size, l.dist, bias=l.bias)
    for l in base.layers:
        if not l.is_input and l.id != x_out.id:
            g.add_layer(l.id, l.size, l.dist, bias=l.bias)
    g.add_layer(x_out.id, x_out.size, x_out.dist, bias=x_out.bias + r_out.bias)

    def emit(conns, mapping):
        for c in conns:
            g.connect(mapping[c.parent], mapping[c.child], c.pattern, c.mask, c.key, c.trainable)

    emit(base.connections, rename)
    emit(refining.connections, r_map)
    emit(base.connections, {l.id: l.id for l in base.layers})
    for id, p in base.dropout.items():
        g.dropout[id] = p
        g.dropout[rename[id]] = p
    for id, p in refining.dropout.items():
        g.dropout[r_map[id]] = p
    g.output = x_out.id
    return check(g)


def build_recurrent_unrolled(base: LayeredChainGraph, recurrent, T: int, mode="indrnn") -> LayeredChainGraph:
    """Unroll ``base`` over ``T`` steps; layer ``id`` at step ``t`` is ``"id@t"``.

    All base parameters are tied across time.  Each recurrent layer gets a
    connection from its previous-step copy: dense for ``"simple"`` (Elman),
    node-diagonal for ``"indrnn"``; the recurrent weights ``U:id`` are tied
    across time as well.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    mode = mode.lower()
    if mode not in ("simple", "indrnn"):
        raise ValueError(f"unknown recurrent mode {mode!r}")
    recurrent = [recurrent] if isinstance(recurrent, str) else list(recurrent)
    for r in recurrent:
        base.layer(r)
        if base.layer(r).is_input:
            raise GraphError(f"input layer {r!r} cannot be recurrent")
    check(base)

    g = LayeredChainGraph()
    _merge_params(g.params, base.params)
    for t in range(1, T + 1):
        for l in base.layers:
            g.add_layer(f"{l.id}@{t}", l.size, l.dist, is_input=l.is_input, bias=l.bias)
        for c in base.connections:
            g.connect(f"{c.parent}@{t}", f"{c.child}@{t}", c.pattern, c.mask, c.key, c.trainable)
        if t > 1:
            for r in recurrent:
                pattern = "dense" if mode == "simple" else "diagonal"
                g.connect(f"{r}@{t - 1}", f"{r}@{t}", pattern, tie_group=f"U:{r}")
        for id, p in base.dropout.items():
            g.dropout[f"{id}@{t}"] = p
    g.output = f"{base.output}@{T}"
    return check(g)


def augment_dropout(graph: LayeredChainGraph, layer_ids, p: float) -> LayeredChainGraph:
    """Copy of ``graph`` with every node of ``layer_ids`` gated by ``Bernoulli(p)``.

    The gate multiplies all pairwise terms in which the node is a parent.
    """
    if not 0.0 < p <= 1.0:
        raise ValueError(f"keep probability {p} outside (0, 1]")
    layer_ids = [layer_ids] if isinstance(layer_ids, str) else list(layer_ids)
    g = graph.copy()
    for id in layer_ids:
        g.layer(id)
        if id == g.output:
            raise GraphError("cannot apply dropout to the output layer")
        g.dropout[id] = float(p)
    return g


def dropout_scaled(graph: LayeredChainGraph) -> LayeredChainGraph:
    """Plain graph whose weights out of annotated layers are multiplied by ``p``."""
    g = graph.copy()
    g.dropout = {}
    for c in g.connections:
        p = graph.dropout.get(c.parent)
        if p is None:
            continue
        key = f"{c.key}*{p!r}"
        if key not in g.params:
            g.params.arrays[key] = graph.params[c.key] * p
            if c.key in graph.params.masks:
                g.params.masks[key] = graph.params.masks[c.key]
            if c.key in graph.params.frozen:
                g.params.frozen.add(key)
        c.tie_group = key
    return g
