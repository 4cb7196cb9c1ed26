"""Compare the compiled kernels with the numpy fallback.

Two parts: per-kernel timings (both backends imported side by side) and an
end-to-end forward+backward timing of the three model paths, run once per
backend in a subprocess because the backend is fixed at import.

    python3 benchmarks/bench_kernels.py [--repeat N] [--json out.json]
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from ddlab import _kernels_py as py_kernels

try:
    from ddlab import _ckernels as c_kernels
except ImportError:  # extension not built
    c_kernels = None

SHAPES = [(512, 64), (2048, 16), (512, 256)]

E2E = r"""
import json, sys, time
import numpy as np
from ddlab import data, kernels, models
from ddlab.autodiff import backward

repeat = int(sys.argv[1])
cfg = models.ModelConfig(resolution=32)
p = models.init_dual_encoder(cfg, 0)
cap = models.init_captioner(cfg, 0)
ds = data.make_dataset(32, 32, 0)
ins = data.tokenize("describe the image", eos=False)
samples = [models.InstructionSample(img, ins, data.tokenize(data.answer_text(s, "describe the image"), eos=False))
           for img, s in zip(ds.images, ds.specs())]
ids, _, imgs = models.batch_sequences(samples)

def vision():
    e = models.encode_image(p, ds.images); backward((e * e).sum())

def text():
    e = models.encode_text(p, ds.captions); backward((e * e).sum())

def captioner():
    logits = models.caption_logits(cap, p, imgs, ids); backward((logits * logits).mean())

out = {"backend": kernels.BACKEND}
for name, fn in (("vision", vision), ("text", text), ("captioner", captioner)):
    fn()
    t = time.perf_counter()
    for _ in range(repeat):
        fn()
    out[name] = (time.perf_counter() - t) / repeat * 1e3
print(json.dumps(out))
"""


def kernel_cases(rng, shape):
    x = rng.normal(size=shape)
    g = rng.normal(size=shape)
    gamma = rng.normal(size=shape[1])
    beta = rng.normal(size=shape[1])
    xhat = (x - x.mean(axis=1, keepdims=True)) / x.std(axis=1, keepdims=True)
    rstd = 1.0 / x.std(axis=1)
    y = np.exp(x - x.max(axis=1, keepdims=True))
    y /= y.sum(axis=1, keepdims=True)
    img = rng.uniform(size=(shape[0] * shape[1],))
    delta = rng.uniform(-0.01, 0.01, size=img.shape)
    direction = rng.normal(size=img.shape)
    return [
        ("layer_norm_fwd", (x, gamma, beta, 1e-5)),
        ("layer_norm_bwd", (g, xhat, gamma, rstd)),
        ("softmax_fwd", (x,)),
        ("softmax_bwd", (y, g)),
        ("log_softmax_fwd", (x,)),
        ("gelu_fwd", (x,)),
        ("gelu_bwd", (x, np.tanh(x), g)),
        ("linf_step", (img, delta, direction, 0.004, 0.0157)),
    ]


def time_call(fn, args, repeat):
    fn(*args)
    t = time.perf_counter()
    for _ in range(repeat):
        fn(*args)
    return (time.perf_counter() - t) / repeat * 1e6


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--e2e-repeat", type=int, default=10)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    rows = []
    print(f"{'kernel':<16} {'shape':<12} {'python us':>10} {'cython us':>10} {'speedup':>8}")
    for shape in SHAPES:
        for name, call_args in kernel_cases(rng, shape):
            t_py = time_call(getattr(py_kernels, name), call_args, args.repeat)
            t_c = time_call(getattr(c_kernels, name), call_args, args.repeat) if c_kernels else float("nan")
            rows.append({"kernel": name, "shape": list(shape), "python_us": t_py, "cython_us": t_c})
            print(f"{name:<16} {str(shape):<12} {t_py:>10.1f} {t_c:>10.1f} {t_py / t_c:>7.2f}x")

    e2e = {}
    for label, env in (("cython", {}), ("python", {"DDLAB_PURE_PYTHON": "1"})):
        res = subprocess.run([sys.executable, "-c", E2E, str(args.e2e_repeat)], capture_output=True, text=True,
                             env={**os.environ, **env}, check=True)
        e2e[label] = json.loads(res.stdout)
    print(f"\n{'path (B=32, fwd+bwd)':<22} {'cython ms':>10} {'python ms':>10}")
    for path in ("vision", "text", "captioner"):
        print(f"{path:<22} {e2e['cython'][path]:>10.1f} {e2e['python'][path]:>10.1f}")
    if e2e["cython"]["backend"] != "cython":
        print("note: compiled extension unavailable; both columns used the numpy fallback")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as f:
            json.dump({"kernels": rows, "end_to_end": e2e}, f, indent=2)


if __name__ == "__main__":
    main()
