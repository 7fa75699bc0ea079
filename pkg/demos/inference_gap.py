"""How far is feed-forward from exact inference?

Feed-forward propagates expected features layer by layer, ignoring the
correlations that exact marginalization would account for. On small binary
nets the exact marginals can be enumerated, and the gap closes as the
weights shrink.

    python3 demos/inference_gap.py
"""
import numpy as np

from chaingraph.verify import marginal_errors


def main():
    scales = (1.0, 0.3, 0.1, 0.03, 0.01)
    err = marginal_errors((2, 3, 3, 2), scales, range(50))
    print("weight scale   median error   max error")
    for k, gamma in enumerate(scales):
        print(f"{gamma:12.2f}   {np.median(err[:, k]):12.2e}   {err[:, k].max():9.2e}")


if __name__ == "__main__":
    main()
