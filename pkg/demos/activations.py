"""Node distributions and the activations their means induce.

Prints the closed-form expected feature of each distribution next to a
Monte Carlo estimate and the familiar activation it stands in for.

    python3 demos/activations.py
"""
import numpy as np

from chaingraph.distributions import SOFTPLUS_STD, Binary, RectifiedGaussian, mc_activation_estimate

CASES = [
    ("Binary{0,1}", Binary(0, 1), "sigmoid", lambda e: 1 / (1 + np.exp(-e))),
    ("Binary{-1,1}", Binary(-1, 1), "tanh", np.tanh),
    ("RG(0, s=1.776)", RectifiedGaussian(0.0, SOFTPLUS_STD), "softplus", lambda e: np.logaddexp(0, e)),
    ("RG(0, |tanh e|)", RectifiedGaussian(0.0, "tanh"), "relu", lambda e: np.maximum(e, 0)),
    ("RG(1/3, |tanh e|)", RectifiedGaussian(1 / 3, "tanh"), "leaky relu", lambda e: np.maximum(e / 3, e)),
]


def main():
    rng = np.random.default_rng(0)
    points = np.array([-3.0, -1.0, 0.0, 1.0, 3.0])
    for name, dist, target, f in CASES:
        mean = dist.mean(points[:, None])[:, 0]
        print(f"{name:18s} vs {target}")
        for e, g, t in zip(points, mean, f(points)):
            (m,), (s,) = mc_activation_estimate(dist, [e], 10 ** 5, rng)
            print(f"  e={e:+.1f}  closed form {g:+.4f}  MC {m:+.4f} (se {s:.4f})  {target} {t:+.4f}")


if __name__ == "__main__":
    main()
