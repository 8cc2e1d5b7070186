"""Timing comparison of the pure-Python and compiled kernel backends.

Run from the repository root:

    python3 benchmarks/bench_kernels.py

Each row times one kernel on both backends and reports the speedup.
The final row times a whole classifier training step per backend; that
runs in subprocesses because the backend is picked once at import time.
"""

import argparse
import os
import random
import subprocess
import sys
import time
from array import array

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from argscore.engine.kernels import backends  # noqa: E402


def _arr(rng, n):
    return array("d", [rng.uniform(-1, 1) for _ in range(n)])


def _cases():
    rng = random.Random(7)
    m = k = n = 48
    a, b = _arr(rng, m * k), _arr(rng, k * n)
    rows, d = 64, 64
    x = _arr(rng, rows * d)
    dy = _arr(rng, rows * d)
    gain, bias = _arr(rng, d), _arr(rng, d)
    big = _arr(rng, 4096)
    dbig = _arr(rng, 4096)
    table = _arr(rng, 512 * 64)
    ids = array("q", [rng.randrange(512) for _ in range(256)])
    logits = _arr(rng, 256 * 3)
    labels = array("q", [rng.choice([-1, 0, 1, 2]) for _ in range(256)])
    adam = {"p": _arr(rng, 4096), "g": _arr(rng, 4096),
            "m": array("d", [0.0] * 4096), "v": array("d", [0.0] * 4096)}

    def ln_pair(K):
        y, means, rstds = K.layer_norm_fwd(x, gain, bias, rows, d, 1e-5)
        K.layer_norm_bwd(x, gain, means, rstds, dy, rows, d)

    def sm_pair(K):
        y = K.softmax_rows(x, rows, d)
        K.softmax_rows_bwd(y, dy, rows, d)

    def ce_pair(K):
        loss, probs, count = K.ce_rows_fwd(logits, labels, 256, 3)
        K.ce_rows_bwd(probs, labels, 256, 3, count, 1.0)

    return [
        ("matmul 48x48x48", lambda K: K.matmul(a, b, m, k, n)),
        ("matmul_nt 48x48x48", lambda K: K.matmul_nt(a, b, m, n, k)),
        ("softmax fwd+bwd 64x64", sm_pair),
        ("layer_norm fwd+bwd 64x64", ln_pair),
        ("gelu_fwd 4096", lambda K: K.gelu_fwd(big)),
        ("gelu_bwd 4096", lambda K: K.gelu_bwd(big, dbig)),
        ("embed_gather 256x64", lambda K: K.embed_gather(table, 64, ids)),
        ("token ce fwd+bwd 256x3", ce_pair),
        ("adam_update 4096", lambda K: K.adam_update(
            adam["p"], adam["g"], adam["m"], adam["v"],
            1e-3, 0.9, 0.999, 1e-8, 3)),
        ("sq_sum 4096", lambda K: K.sq_sum(big)),
        ("quant16 4096", lambda K: K.quant16_inplace(array("d", big))),
    ]


def _time(fn, K, budget=0.05):
    # calibrate the repeat count on this backend, then take the best of 3
    reps = 1
    while True:
        t0 = time.perf_counter()
        for _ in range(reps):
            fn(K)
        if time.perf_counter() - t0 > 0.005 or reps >= 1 << 16:
            break
        reps *= 4
    best = float("inf")
    for _ in range(3):
        t0 = time.perf_counter()
        for _ in range(reps):
            fn(K)
        best = min(best, (time.perf_counter() - t0) / reps)
    return best


def _model_step_seconds():
    from argscore.corpus import IGNORE, EncodedEssay
    from argscore.engine.core import RngStream
    from argscore.model import Model, ModelConfig
    from argscore.training import TrainConfig, adam_step, batch_backward
    from argscore.training import OptimizerState

    rng = random.Random(3)
    batch = []
    for e in range(4):
        ids = [rng.randrange(4, 40) for _ in range(24)]
        labels = [rng.choice([IGNORE, 0, 1, 2]) for _ in range(24)]
        labels[0] = 0
        batch.append(EncodedEssay(
            essay_id=f"e{e}", token_ids=ids, token_labels=labels,
            token_element_index=[-1] * 24, n_tokens=24, truncated=False,
            element_ids=[], element_ratings=[], tail_truncated_elements=[],
            dropped_elements=[]))
    cfg = ModelConfig(vocab_size=40, num_layers=2, hidden_size=32,
                      num_heads=2, relative_window=4, max_len=32, seed=0)
    model = Model(cfg)
    tc = TrainConfig(learning_rate=1e-3)
    state = OptimizerState(model)
    stream = RngStream(1)
    batch_backward(model, batch, tc, stream.child("warm"))  # warm up
    model.zero_grad()
    t0 = time.perf_counter()
    steps = 5
    for s in range(steps):
        model.zero_grad()
        batch_backward(model, batch, tc, stream.child(f"s{s}"))
        adam_step(model, state, tc)
    return (time.perf_counter() - t0) / steps


def _subprocess_step(pure):
    env = dict(os.environ, ARGSCORE_PURE="1" if pure else "0")
    out = subprocess.run([sys.executable, os.path.abspath(__file__), "--model-step"],
                         capture_output=True, text=True, env=env, check=True)
    line = out.stdout.strip().splitlines()[-1]
    backend, seconds = line.split()
    return backend, float(seconds)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--model-step", action="store_true",
                    help="time one training step on the active backend and exit")
    args = ap.parse_args(argv)

    if args.model_step:
        from argscore.engine.kernels import BACKEND
        print(f"{BACKEND} {_model_step_seconds():.6f}")
        return 0

    avail = backends()
    if "fast" not in avail:
        print("compiled backend not built; timing the pure backend only")
    names = ["pure"] + (["fast"] if "fast" in avail else [])
    print(f"{'kernel':<28}" + "".join(f"{n:>12}" for n in names) +
          ("     speedup" if len(names) == 2 else ""))
    for label, fn in _cases():
        times = [_time(fn, avail[n]) for n in names]
        row = f"{label:<28}" + "".join(f"{t * 1e3:>10.3f}ms" for t in times)
        if len(times) == 2:
            row += f"{times[0] / times[1]:>11.1f}x"
        print(row)

    if "fast" in avail:
        rows = [_subprocess_step(pure=True), _subprocess_step(pure=False)]
        label = "classifier train step"
        t_pure, t_fast = rows[0][1], rows[1][1]
        print(f"{label:<28}{t_pure * 1e3:>10.3f}ms{t_fast * 1e3:>10.3f}ms"
              f"{t_pure / t_fast:>11.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
