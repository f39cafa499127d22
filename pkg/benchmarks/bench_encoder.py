"""Compare the compiled encoder forward against the pure-numpy lane.

The compiled kernel fuses embed + attention + feed-forward per window and
calls BLAS directly, which mostly pays off at small batch sizes where
numpy dispatch overhead dominates (the per-step act() path). Run:

    python benchmarks/bench_encoder.py
"""

import time

import numpy as np

from memrl import backend
from memrl.encoder import EncoderConfig, TransformerEncoder


def bench(enc, feats, lane, repeats=50):
    backend.forward_stack(enc, feats, lane=lane)  # warmup / pack weights
    t0 = time.perf_counter()
    for _ in range(repeats):
        backend.forward_stack(enc, feats, lane=lane)
    return (time.perf_counter() - t0) / repeats


def main():
    if not backend.compiled_available():
        print("compiled extension not built; only the python lane is available")
        return
    cfg = EncoderConfig(d=64, n_layers=4, n_heads=4, d_ff=256, seq_len=15)
    enc = TransformerEncoder(cfg, input_dim=5, seed=0)
    rng = np.random.default_rng(0)
    print(f"encoder d={cfg.d} L={cfg.n_layers} heads={cfg.n_heads} N={cfg.seq_len}")
    print(f"{'batch':>6} {'python':>12} {'compiled':>12} {'speedup':>9} {'max |diff|':>12}")
    for batch in (1, 8, 64):
        feats = rng.normal(size=(batch, cfg.seq_len, 5))
        t_py = bench(enc, feats, "python")
        t_cy = bench(enc, feats, "compiled")
        s_py, _ = backend.forward_stack(enc, feats, lane="python")
        s_cy, _ = backend.forward_stack(enc, feats, lane="compiled")
        diff = np.abs(s_py - s_cy).max()
        print(f"{batch:>6} {t_py * 1e6:>10.1f}us {t_cy * 1e6:>10.1f}us "
              f"{t_py / t_cy:>8.2f}x {diff:>12.2e}")


if __name__ == "__main__":
    main()
