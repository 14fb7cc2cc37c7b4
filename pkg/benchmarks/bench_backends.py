"""Time the compiled and pure-numpy kernel paths on the same inputs.

    python benchmarks/bench_backends.py [--repeats 20] [--batch 16] [--tokens 48]

Each kernel runs once per backend before timing so numba compilation is
excluded. Outputs are compared as well; the script exits non-zero if the two
backends disagree beyond 1e-12.
"""
from __future__ import annotations

import argparse
import sys
import timeit

import numpy as np

from hopgraph import _accel, _kernels
from hopgraph.graph import add_skip_edges
from hopgraph.harness.synth import SyntheticConfig, generate_corpus


def _graph_inputs(samples: int):
    cfg = SyntheticConfig(samples=samples, seed=0, entities_per_graph=(20, 36), predicates_per_graph=(10, 18))
    return [add_skip_edges(s.graph).adjacency_csr() + (s.graph.num_entities + s.graph.num_predicates,)
            for s in generate_corpus(cfg)]


def _kernel_inputs(batch: int, tokens: int, heads: int, rng):
    dist = rng.integers(1, 7, size=(batch, tokens, tokens))
    roles = rng.integers(0, 3, size=(batch, tokens))
    raw = rng.normal(0.0, 0.5, size=(heads, 4))
    grad = rng.normal(size=(batch, heads, tokens, tokens))
    return dist, roles, raw, grad


def run(repeats: int, batch: int, tokens: int, heads: int) -> int:
    rng = np.random.default_rng(0)
    graphs = _graph_inputs(batch)
    dist, roles, raw, grad = _kernel_inputs(batch, tokens, heads, rng)
    kind = _kernels.RATIONAL_QUADRATIC

    cases = {
        "bfs_all_pairs": lambda: [_kernels.bfs_all_pairs(ip, ix, n) for ip, ix, n in graphs],
        "kernel_forward": lambda: _kernels.kernel_forward(dist, roles, raw, kind),
        "kernel_backward": lambda: _kernels.kernel_backward(dist, roles, raw, kind, grad),
    }
    backends = ["numpy"] + (["numba"] if _accel.NUMBA_AVAILABLE else [])
    timings, results = {}, {}
    for name in backends:
        with _accel.use_backend(name):
            for case, fn in cases.items():
                results[(name, case)] = fn()  # warm-up, compiles under numba
                timings[(name, case)] = min(timeit.repeat(fn, number=1, repeat=repeats))

    print(f"batch={batch} tokens={tokens} heads={heads} repeats={repeats} (best of, milliseconds)")
    print(f"{'kernel':<18}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    status = 0
    for case in cases:
        line = f"{case:<18}" + "".join(f"{1e3 * timings[(b, case)]:>12.3f}" for b in backends)
        if len(backends) > 1:
            line += f"{timings[('numpy', case)] / timings[('numba', case)]:>11.1f}x"
            a, b = results[("numpy", case)], results[("numba", case)]
            diff = max(float(np.abs(np.asarray(x) - np.asarray(y)).max()) for x, y in zip(a, b)) if case == "bfs_all_pairs" \
                else float(np.abs(a - b).max())
            if diff > 1e-12:
                line += f"   MISMATCH {diff:.2e}"
                status = 1
        print(line)
    return status


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--tokens", type=int, default=48)
    p.add_argument("--heads", type=int, default=4)
    a = p.parse_args(argv)
    return run(a.repeats, a.batch, a.tokens, a.heads)


if __name__ == "__main__":
    sys.exit(main())
