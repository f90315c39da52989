"""Time the compiled kernels against the pure-Python fallback.

The two backends are bit-exact by construction, so this script checks
equality on every case while timing it. The kernel table times the raw
primitives; the train-step section runs one local training pass through
each backend in a subprocess so the import-time selection stays honest.

Usage: python3 benchmarks/bench_backends.py [--repeats 5] [--size 128]
"""

import argparse
import subprocess
import sys
import time

import numpy as np

from fedquad import _pykernels
from fedquad.rng import RngStream

try:
    from fedquad import _kernels
except ImportError:
    _kernels = None


def rand_matrix(stream, rows, cols, lo=-1.0, hi=1.0):
    return np.array(
        [[stream.uniform_in(lo, hi) for _ in range(cols)] for _ in range(rows)]
    )


def best_of(fn, repeats):
    best = float("inf")
    out = None
    for _ in range(repeats):
        start = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - start)
    return best, out


def kernel_cases(size):
    s = RngStream(90210)
    a = rand_matrix(s, size, size)
    b = rand_matrix(s, size, size)
    x = rand_matrix(s, size, size)
    dy = rand_matrix(s, size, size)
    gain = rand_matrix(s, 1, size)[0]
    bias = rand_matrix(s, 1, size)[0]
    y, mean, invstd = _pykernels.layer_norm(x, gain, bias, 1e-5)
    cases = [
        ("matmul", lambda k: k.matmul(a, b)),
        ("gelu", lambda k: k.gelu(x)),
        ("gelu_backward", lambda k: k.gelu_backward(x, dy)),
        ("layer_norm", lambda k: k.layer_norm(x, gain, bias, 1e-5)),
        (
            "layer_norm_backward",
            lambda k: k.layer_norm_backward(dy, x, gain, mean, invstd),
        ),
        ("row_sums", lambda k: k.row_sums(x)),
        ("quantize_nearest", lambda k: k.quantize_nearest(x, 32)),
        (
            "quantize_stochastic",
            lambda k: k.quantize_stochastic(x, 32, 424242, 0),
        ),
    ]
    return cases


def equal(out_a, out_b):
    if isinstance(out_a, tuple):
        return all(equal(p, q) for p, q in zip(out_a, out_b))
    return np.asarray(out_a).tobytes() == np.asarray(out_b).tobytes()


def bench_kernels(size, repeats):
    print(f"kernel micro-benchmarks ({size}x{size}, best of {repeats})")
    header = f"{'kernel':<22}{'python':>12}{'compiled':>12}{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for name, call in kernel_cases(size):
        t_py, out_py = best_of(lambda: call(_pykernels), repeats)
        if _kernels is None:
            print(f"{name:<22}{t_py * 1e3:>10.2f}ms{'n/a':>12}{'n/a':>10}")
            continue
        t_c, out_c = best_of(lambda: call(_kernels), repeats)
        mark = "" if equal(out_py, out_c) else "  OUTPUT MISMATCH"
        print(
            f"{name:<22}{t_py * 1e3:>10.2f}ms{t_c * 1e3:>10.2f}ms"
            f"{t_py / t_c:>9.1f}x{mark}"
        )


TRAIN_SNIPPET = """
import time
from fedquad import backend
from fedquad.federation import SimDevice, TrainParams, local_train
from fedquad.model import assignment_from_configuration, init_model
from fedquad.quant import QuantSpec
from fedquad.resource import Configuration, CostModel, DeviceProfile
from fedquad.rng import RngStream
from fedquad.workload import generate_task

spec = QuantSpec(block=32, rounding="stochastic")
mdl = init_model(RngStream(7), n_layers=6, hidden=32, classes=3, rank=4, quant_spec=spec)
data = generate_task(RngStream(8), 256, 32, 3)
profile = DeviceProfile(0, "strong", [100.0], [1.0], RngStream(9))
dev = SimDevice(profile, mdl, data, RngStream(10), RngStream(11))
asg = assignment_from_configuration(Configuration(6, 2), 6)
cm = CostModel(0.25, 1.0, 0.8, 2.5, 5.0, 2.34)
params = TrainParams(batch_size=32)
local_train(dev, asg, params, 1, cm)  # warm up
start = time.perf_counter()
for h in range(2, 5):
    local_train(dev, asg, params, h, cm)
print(backend.BACKEND_NAME, (time.perf_counter() - start) / 3)
"""


def bench_train_step():
    print()
    print("local training pass (256 samples, cfg (6, 2), mean of 3)")
    for name in ("python", "compiled"):
        if name == "compiled" and _kernels is None:
            print(f"{name:<10} not built")
            continue
        proc = subprocess.run(
            [sys.executable, "-c", TRAIN_SNIPPET],
            capture_output=True,
            text=True,
            env={"FEDQUAD_BACKEND": name, "PATH": "/usr/bin:/bin"},
        )
        if proc.returncode != 0:
            print(f"{name:<10} failed: {proc.stderr.strip().splitlines()[-1]}")
            continue
        reported, seconds = proc.stdout.split()
        print(f"{reported:<10} {float(seconds) * 1e3:8.1f} ms/pass")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--size", type=int, default=128)
    args = ap.parse_args()
    if _kernels is None:
        print("compiled backend not built; timing the fallback only")
    bench_kernels(args.size, args.repeats)
    bench_train_step()


if __name__ == "__main__":
    main()
