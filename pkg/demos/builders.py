"""Residual blocks and recurrent layers as graph builders.

A refinement module adds a weight-tied copy of the base layer plus a
refining chain, which computes the same thing as a pre-activation residual
block. Unrolling a layer in time with a node-diagonal recurrence gives an
IndRNN; each node only sees its own past.

    python3 demos/builders.py
"""
import numpy as np

from chaingraph.distributions import Binary, RectifiedGaussian
from chaingraph.graph import LayeredChainGraph, build_recurrent_unrolled, build_refinement, init_params
from chaingraph.inference import feed_forward


def refinement_demo(x):
    relu = RectifiedGaussian(0.0, "tanh")
    base = LayeredChainGraph()
    base.add_layer("x", 3, Binary(0, 1), is_input=True).add_layer("h", 4, relu).connect("x", "h")
    ref = LayeredChainGraph()
    ref.add_layer("r_in", 4, relu, is_input=True).add_layer("z", 5, Binary(-1, 1))
    ref.add_layer("r_out", 4, relu, bias="b:r_out")
    ref.connect("r_in", "z").connect("z", "r_out")
    init_params(base, seed=0)
    init_params(ref, seed=1)
    g = build_refinement(base, ref)
    print("refinement layers:", [l.id for l in g.layers])
    print("base output      ", np.round(feed_forward(base, x).output, 4))
    print("refined output   ", np.round(feed_forward(g, x).output, 4))


def indrnn_demo():
    base = LayeredChainGraph()
    base.add_layer("x", 1, Binary(0, 1), is_input=True)
    base.add_layer("h", 3, RectifiedGaussian(0.0, "tanh")).connect("x", "h")
    init_params(base, seed=0)
    g = build_recurrent_unrolled(base, "h", 5, "indrnn")
    g.params["U:h"] = np.array([0.9, 0.5, -0.5])[:, None, None]
    st = feed_forward(g, np.array([1.0, 0.0, 0.0, 0.0, 0.0]))
    print("IndRNN response to an impulse (rows: time, cols: nodes)")
    for t in range(1, 6):
        print(f"  t={t}", np.round(st.flat(f"h@{t}"), 4))


if __name__ == "__main__":
    refinement_demo(np.array([0.2, 0.9, 0.4]))
    indrnn_demo()
