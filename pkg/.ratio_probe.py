"""Probe: direct minimization of the relative eigen residual on trained params.

rel(x)^2 = 1 - <g,x>^2 / (|g|^2 |x|^2) with g = tdv_grad(x). Gradient uses
tdv_hvp twice per step. Projected Adam in [0,1]^n. Measures the attainable
floor of the ratio for the trained desk model.
"""
import sys
import numpy as np
from tdv.regularizer import load_checkpoint, tdv_grad, tdv_hvp

params, T, meta = load_checkpoint("/root/pkg/.probe_A/checkpoint_final.tdvc")


def rel_and_grad(x):
    g = tdv_grad(x, params)
    c = float(np.vdot(g, x))
    G = float(np.vdot(g, g))
    X = float(np.vdot(x, x))
    hx = tdv_hvp(x, params, x)
    hg = tdv_hvp(x, params, g)
    # d/dx of c^2/(G X)
    dc = hx + g
    num = 2.0 * c * dc / (G * X) - (c * c) * (2.0 * X * hg + 2.0 * G * x) / (G * X) ** 2
    rel2 = 1.0 - c * c / (G * X)
    return float(np.sqrt(max(rel2, 0.0))), -num


def make_init(kind, n):
    rng = np.random.default_rng(7)
    x = np.zeros((1, n, n))
    if kind == "dots":
        step = max(4, n // 8)
        x[0, step // 2::step, step // 2::step] = 1.0
    elif kind == "fewdots":
        for (i, j) in [(n // 4, n // 4), (n // 4, 3 * n // 4),
                       (3 * n // 4, n // 4), (3 * n // 4, 3 * n // 4)]:
            x[0, i, j] = 1.0
    elif kind == "rand":
        x = rng.uniform(0.0, 1.0, (1, n, n))
    elif kind == "blob":
        ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        x[0] = np.exp(-((ii - n / 2) ** 2 + (jj - n / 2) ** 2) / 8.0)
    return x


def run(kind, n, iters=3000, lr=2e-2):
    x = make_init(kind, n)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    best = np.inf
    for it in range(1, iters + 1):
        rel, grad = rel_and_grad(x)
        best = min(best, rel)
        m = 0.9 * m + 0.1 * grad
        v = 0.999 * v + 0.001 * grad * grad
        mh = m / (1.0 - 0.9 ** it)
        vh = v / (1.0 - 0.999 ** it)
        x = np.clip(x - lr * mh / (np.sqrt(vh) + 1e-8), 0.0, 1.0)
        if not np.any(x):
            print(f"  {kind:8s} n={n} collapsed to 0 at it={it}")
            return
        if it % 500 == 0 or it == 1:
            print(f"  {kind:8s} n={n} it={it:5d} rel={rel:.4f} "
                  f"mean={float(x.mean()):.4f} max={float(x.max()):.3f}",
                  flush=True)
    print(f"{kind:8s} n={n} FINAL best rel={best:.4f}", flush=True)


for kind in ("dots", "fewdots", "blob", "rand"):
    run(kind, 32)
for kind in ("fewdots", "dots"):
    run(kind, 64, iters=2000)
