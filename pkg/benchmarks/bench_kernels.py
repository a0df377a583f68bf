"""Compare the compiled GRU kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20] [--batch 32] [--steps 12]

Shapes default to the desk preset (hidden 64, one batch of 32 trajectories).
Each kernel is timed on identical inputs and the outputs are checked to agree.
"""

import argparse
import timeit

import numpy as np

from poiaudit.model import _backend
from poiaudit.model.network import ModelConfig, PoiModel


def make_inputs(steps, batch, hidden, seed=0):
    rng = np.random.default_rng(seed)
    A = rng.normal(scale=0.5, size=(steps, batch, 3 * hidden))
    h0 = np.tanh(rng.normal(size=(batch, hidden)))
    Wh = rng.normal(scale=1 / np.sqrt(hidden), size=(hidden, 3 * hidden))
    mask = (np.arange(steps)[:, None] < rng.integers(2, steps + 1, batch)[None, :]).astype(np.float64)
    dHs = rng.normal(size=(steps, batch, hidden)) * mask[:, :, None]
    return A, h0, Wh, mask, dHs


def bench(backend, args):
    A, h0, Wh, mask, dHs = make_inputs(args.steps, args.batch, args.hidden)
    fwd = backend.gru_forward(A, h0, Wh, mask)
    n_params = PoiModel(200, 500, ModelConfig(hidden_dim=args.hidden)).flat.size  # desk-preset model
    w, g = np.zeros(n_params), np.random.default_rng(1).normal(size=n_params)
    m, v = np.zeros(n_params), np.zeros(n_params)
    timings = {
        "gru_forward": lambda: backend.gru_forward(A, h0, Wh, mask),
        "gru_backward": lambda: backend.gru_backward(dHs, *fwd, Wh, mask),
        "adam_step": lambda: backend.adam_step(w, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 1),
    }
    out = {}
    for name, fn in timings.items():
        out[name] = min(timeit.repeat(fn, number=args.number, repeat=args.repeat)) / args.number
    return out, fwd, backend.gru_backward(dHs, *fwd, Wh, mask)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--number", type=int, default=20)
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--steps", type=int, default=12)
    ap.add_argument("--hidden", type=int, default=64)
    args = ap.parse_args()

    names = _backend.available_backends()
    print(f"selected at import: {_backend.BACKEND}; available: {', '.join(names)}")
    results = {n: bench(_backend.load_backend(n), args) for n in names}
    if len(names) == 2:
        (_, f_cy, b_cy), (_, f_py, b_py) = results["cython"], results["python"]
        diff = max(float(np.max(np.abs(a - b))) for a, b in zip(f_cy + b_cy, f_py + b_py))
        print(f"max abs difference between backends: {diff:.2e}")
    print(f"{'kernel':<14}" + "".join(f"{n + ' (us)':>16}" for n in names) + ("     speedup" if len(names) == 2 else ""))
    for kernel in ("gru_forward", "gru_backward", "adam_step"):
        times = [results[n][0][kernel] * 1e6 for n in names]
        line = f"{kernel:<14}" + "".join(f"{t:>16.1f}" for t in times)
        if len(times) == 2:
            line += f"{times[1] / times[0]:>11.1f}x"
        print(line)


if __name__ == "__main__":
    main()
