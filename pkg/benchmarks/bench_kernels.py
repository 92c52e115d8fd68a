"""Compare the compiled kernels against the NumPy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Shapes match one training iteration at the default batch (B=16, mu=7):
112 unlabeled rows, K=4 seen classes, 192-wide hidden layers.
"""

import argparse
import timeit

import numpy as np

from iomatch import _kernels_py as fallback

try:
    from iomatch import _kernels as compiled
except ImportError:
    compiled = None


def cases(rng):
    n, k, h = 112, 4, 192
    logits = rng.normal(size=(n, k))
    probs = fallback.softmax_rows(logits)
    pair = rng.normal(size=(n, 2 * k))
    o = fallback.pair_softmax(pair)
    hidden = rng.normal(size=(n, h))
    y = rng.integers(0, k, size=n).astype(np.int64)
    return {
        "softmax_rows": lambda m: m.softmax_rows(logits),
        "softmax_rows_backward": lambda m: m.softmax_rows_backward(probs, logits),
        "pair_softmax": lambda m: m.pair_softmax(pair),
        "pair_softmax_backward": lambda m: m.pair_softmax_backward(o, logits),
        "relu": lambda m: m.relu(hidden),
        "relu_backward": lambda m: m.relu_backward(hidden, hidden),
        "row_argmax": lambda m: m.row_argmax(probs),
        "hard_negative_index": lambda m: m.hard_negative_index(o, y),
        "fuse_open_targets": lambda m: m.fuse_open_targets(probs, o),
    }


def best_of(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--number", type=int, default=2000)
    args = parser.parse_args()
    if compiled is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation`")
        return
    print(f"{'kernel':<24}{'numpy us':>10}{'cython us':>11}{'speedup':>9}")
    for name, call in cases(np.random.default_rng(0)).items():
        t_py = best_of(lambda: call(fallback), args.repeat, args.number)
        t_c = best_of(lambda: call(compiled), args.repeat, args.number)
        print(f"{name:<24}{t_py * 1e6:>10.2f}{t_c * 1e6:>11.2f}{t_py / t_c:>8.1f}x")


if __name__ == "__main__":
    main()
