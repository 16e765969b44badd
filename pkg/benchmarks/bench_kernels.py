"""Compare the compiled and numpy AUROC kernels.

Times ``auc_presorted_batch`` on bootstrap-shaped inputs (one row of
resample counts per replicate) and a full ``evaluate`` call with 1000
replicates over six tasks, once per backend.

    python3 benchmarks/bench_kernels.py --examples 500 2000 --replicates 1000
"""

import argparse
import timeit

import numpy as np

from cxrtrunc import _kernels_py, evaluator
from cxrtrunc.data import EVAL_TASKS, OBSERVATIONS, LabelMatrix

try:
    from cxrtrunc import _kernels as compiled
except ImportError:
    compiled = None


def kernel_inputs(n, replicates, seed):
    rng = np.random.default_rng(seed)
    truth = rng.integers(0, 2, n).astype(np.uint8)
    scores = np.round(rng.normal(truth, 1.0), 2)
    order = np.argsort(scores, kind="stable")
    counts = np.stack([np.bincount(rng.integers(0, n, n), minlength=n) for _ in range(replicates)])
    return scores[order], truth[order], np.ascontiguousarray(counts[:, order].astype(np.int64))


def label_matrix(n, seed):
    rng = np.random.default_rng(seed)
    truth = rng.integers(0, 2, (n, len(OBSERVATIONS)))
    scores = 1 / (1 + np.exp(-(2 * truth - 1 + rng.normal(0, 1, truth.shape))))
    return LabelMatrix(scores, truth, list(OBSERVATIONS))


def best_of(fn, repeats):
    return min(timeit.repeat(fn, number=1, repeat=repeats))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--examples", type=int, nargs="+", default=[200, 1000, 5000])
    parser.add_argument("--replicates", type=int, default=1000)
    parser.add_argument("--repeats", type=int, default=3)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    backends = {"numpy": _kernels_py.auc_presorted_batch}
    if compiled is None:
        print("compiled extension not built; timing the numpy kernel only")
    else:
        backends["cython"] = compiled.auc_presorted_batch

    print(f"{'examples':>8} {'what':<22} " + " ".join(f"{b:>10}" for b in backends) + "   speedup")
    for n in args.examples:
        s, t, c = kernel_inputs(n, args.replicates, args.seed)
        results = [fn(s, t, c) for fn in backends.values()]
        if len(results) == 2 and not np.array_equal(results[0], results[1]):
            raise SystemExit(f"backends disagree at n={n}")
        kernel = {b: best_of(lambda fn=fn: fn(s, t, c), args.repeats) for b, fn in backends.items()}

        lm = label_matrix(n, args.seed)
        full = {}
        original = evaluator.auc_presorted_batch
        try:
            for b, fn in backends.items():
                evaluator.auc_presorted_batch = fn
                full[b] = best_of(lambda: evaluator.evaluate(lm, EVAL_TASKS, args.replicates, seed=1),
                                  args.repeats)
        finally:
            evaluator.auc_presorted_batch = original

        for what, times in ((f"kernel x{args.replicates}", kernel), (f"evaluate x{args.replicates}", full)):
            speed = f"{times['numpy'] / times['cython']:8.1f}x" if "cython" in times else ""
            cells = " ".join(f"{times[b] * 1000:8.1f}ms" for b in backends)
            print(f"{n:>8} {what:<22} {cells} {speed}")


if __name__ == "__main__":
    main()
