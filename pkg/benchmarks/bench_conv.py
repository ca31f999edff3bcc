"""Compare the numba and pure-numpy convolution kernels.

    python3 benchmarks/bench_conv.py [--repeat N]

Both backends live in ``vmp._accel``; the library picks one at import time
from ``VMP_DISABLE_NUMBA``. This script calls them directly so a single run
times both and checks they agree, then times a small end-to-end run
under each setting of the flag.
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from vmp import _accel

SHAPES = [  # (batch, c_in, h, w, kh, kw, c_out)
    (64, 1, 8, 8, 3, 3, 8),
    (64, 8, 8, 8, 3, 3, 16),
    (128, 16, 16, 16, 3, 3, 16),
]


def best_of(fn, repeat):
    fn()  # warm-up, includes numba compilation
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


E2E = """
import time
from vmp.domains import DatasetSpec, corruption_stream, generate
from vmp.nn.model import small_cnn
from vmp.protocols import ProtocolConfig, TrainConfig, run_continual_stream, train_source
x, y = generate(DatasetSpec("tinygrid", 150, 4, seed=0))
t = time.perf_counter()
model = train_source(x, y, small_cnn((1, 8, 8), [8], 4, bottleneck=32), TrainConfig(epochs=30, lr=0.02, seed=0))
stream = corruption_stream(DatasetSpec("tinygrid", 128, 4), batch_size=64, seed=0)
m, _, _ = run_continual_stream(model, stream, ProtocolConfig(protocol="continual_online", seed=0))
print(time.perf_counter() - t, m.extra["mean_error"])
"""


def end_to_end():
    """Source training plus one continual stream, once per backend (fresh interpreter each)."""
    print("\nend to end: tinygrid CNN training + 15-domain continual stream")
    for flag, label in (("1", "numpy"), ("", "numba")):
        env = dict(os.environ, VMP_DISABLE_NUMBA=flag)
        subprocess.run([sys.executable, "-c", E2E], env=env, check=True, capture_output=True)  # warm numba cache
        out = subprocess.run([sys.executable, "-c", E2E], env=env, check=True, capture_output=True, text=True)
        secs, err = out.stdout.split()
        print(f"  {label:<6} {float(secs):6.2f} s   mean stream error {float(err):.6f}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-e2e", action="store_true")
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'shape':<28}{'op':<12}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for b, ci, h, w, kh, kw, co in SHAPES:
        x = rng.normal(size=(b, ci, h, w))
        k = rng.normal(size=(kh, kw, ci, co))
        g = rng.normal(size=(b, co, h, w))
        ops = {
            "forward": (lambda: _accel.conv2d_forward_np(x, k), lambda: _accel.conv2d_forward_nb(x, k)),
            "grad_in": (lambda: _accel.conv2d_grad_input_np(g, k), lambda: _accel.conv2d_grad_input_nb(g, k)),
            "grad_k": (lambda: _accel.conv2d_grad_kernel_np(x, g, k.shape),
                       lambda: _accel.conv2d_grad_kernel_nb(x, g, k.shape)),
        }
        for name, (f_np, f_nb) in ops.items():
            np.testing.assert_allclose(f_np(), f_nb(), rtol=1e-10, atol=1e-10)
            t_np, t_nb = best_of(f_np, args.repeat), best_of(f_nb, args.repeat)
            print(f"{str((b, ci, h, w, kh, kw, co)):<28}{name:<12}{1e3 * t_np:>10.2f}{1e3 * t_nb:>10.2f}"
                  f"{t_np / t_nb:>8.1f}x")
    if not args.skip_e2e:
        end_to_end()


if __name__ == "__main__":
    main()
