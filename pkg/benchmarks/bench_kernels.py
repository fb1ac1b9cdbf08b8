"""Compare the compiled and numpy kernel backends on model-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Prints one row per kernel with the median time for each backend and the
speedup of the compiled core. Shapes match one desk-model training batch
(16 chunks of 64 tokens, hidden 128, 4 heads, intermediate 512).
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from capmlm import kernels
from capmlm.config import PipelineConfig
from capmlm.pipeline import prepare_capture
from capmlm.synth import FlowGrammar, generate
from capmlm.tokenizer import split_words, train_vocab


def _median_time(fn, repeat: int) -> float:
    fn()  # warm up
    runs = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        runs.append(time.perf_counter() - t0)
    return statistics.median(runs)


def _cases():
    rng = np.random.default_rng(0)
    b, t, d, h, ff = 16, 64, 128, 4, 512
    x_ff = rng.normal(size=(b, t, ff)).astype(np.float32)
    dy_ff = rng.normal(size=x_ff.shape).astype(np.float32)
    x = rng.normal(size=(b, t, d)).astype(np.float32)
    g, beta = np.ones(d, np.float32), np.zeros(d, np.float32)
    dy = rng.normal(size=x.shape).astype(np.float32)
    scores = rng.normal(size=(b, h, t, t))
    valid = np.ones((b, t), bool)
    valid[:, 40:] = False

    cfg = PipelineConfig()
    corpus = [prepare_capture(lc.capture, cfg) for lc in generate(FlowGrammar.default(), 40, 10, seed=1)]
    vocab = train_vocab(corpus, 2048)
    words = [w for sc in corpus[:10] for _, line in sc.lines for w in split_words(line)]

    def wp(k):
        return lambda: [k.wordpiece(w, vocab.initial, vocab.cont, 1, vocab.max_len) for w in words]

    return {
        f"wordpiece ({len(words)} words)": wp,
        "gelu": lambda k: lambda: k.gelu(x_ff),
        "gelu_grad": lambda k: lambda: k.gelu_grad(x_ff, dy_ff),
        "layernorm": lambda k: lambda: k.layernorm(x, g, beta, 1e-12),
        "layernorm_grad": lambda k: (lambda c: lambda: k.layernorm_grad(dy, c[1], c[2], g))(k.layernorm(x, g, beta, 1e-12)),
        "masked_softmax": lambda k: lambda: k.masked_softmax(scores, valid),
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    names = kernels.available()
    if "cython" not in names:
        print("compiled kernels not built; only the numpy backend is available")
    backends = {n: kernels.get_backend(n) for n in names}
    print(f"{'kernel':<28}" + "".join(f"{n + ' ms':>12}" for n in names) + ("   speedup" if len(names) > 1 else ""))
    for label, make in _cases().items():
        ms = {n: 1e3 * _median_time(make(k), args.repeat) for n, k in backends.items()}
        row = f"{label:<28}" + "".join(f"{ms[n]:>12.3f}" for n in names)
        if len(names) > 1:
            row += f"{ms['python'] / ms['cython']:>9.2f}x"
        print(row)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
