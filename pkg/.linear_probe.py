"""Probe: with every residual k2 zeroed, R is linear and D1R is a constant
zero-sum field g0 = sum_f w_f G_f. Optimize w so the negative l2 mass of g0
is tiny; then rel = |g0^-|/|g0| at x ~ g0^+ which eigen_extract can reach.
"""
import numpy as np
from tdv.regularizer import TdvArch, init_params, tdv_grad


def field_basis(arch, seed, n):
    params = init_params(arch, np.random.default_rng(seed))
    for blk in params.blocks:
        for pair in blk.res_down + blk.res_up:
            pair.k2.weights[:] = 0.0
    x = np.zeros((1, n, n))
    cols = []
    m = arch.features
    for f in range(m):
        params.w.weights[:] = 0.0
        params.w.weights[0, f] = 1.0
        cols.append(tdv_grad(x, params).ravel())
    return params, np.stack(cols, axis=1)


def optimize_w(G, iters=4000, seed=0):
    rng = np.random.default_rng(seed)
    m = G.shape[1]
    best = (np.inf, None)
    for trial in range(8):
        w = rng.standard_normal(m)
        mom = np.zeros(m)
        vel = np.zeros(m)
        for it in range(1, iters + 1):
            g = G @ w
            gn = np.minimum(g, 0.0)
            nn = float(gn @ gn)
            tt = float(g @ g)
            if tt < 1e-30:
                break
            J = nn / tt
            # d/dw of |g^-|^2/|g|^2
            grad = 2.0 * (G.T @ gn) / tt - nn * 2.0 * (G.T @ g) / tt ** 2
            mom = 0.9 * mom + 0.1 * grad
            vel = 0.999 * vel + 0.001 * grad * grad
            w = w - 0.05 * (mom / (1 - 0.9 ** it)) / (
                np.sqrt(vel / (1 - 0.999 ** it)) + 1e-12)
        g = G @ w
        rel = float(np.linalg.norm(np.minimum(g, 0.0)) / np.linalg.norm(g))
        if rel < best[0]:
            best = (rel, w.copy())
    return best


for scales in (2, 3):
    for padding in ("replicate", "zero"):
        for feats in (8, 16):
            for n in (32, 48):
                arch = TdvArch(scales=scales, blocks=1, features=feats,
                               channels=1, potential="identity",
                               padding=padding)
                params, G = field_basis(arch, seed=3, n=n)
                rel, w = optimize_w(G)
                print(f"scales={scales} pad={padding:9s} m={feats:2d} "
                      f"n={n} -> rel floor {rel:.4f}", flush=True)
