import os
import sys
import time

import numpy as np

sys.path.insert(0, "src")
sys.path.insert(0, "tests")

from tdv.dataset import Dataset, make_synthetic_images
from tdv.flow import run_flow
from tdv.imageio import psnr
from tdv.operators import make_identity
from tdv.regularizer import TdvArch
from tdv.training import (LossFn, TrainConfig, _draw_batch,
                          stopping_time_report, train)

tag = sys.argv[1]
lr = float(sys.argv[2])
halving = int(sys.argv[3])
T_init = float(sys.argv[4])
iters = int(sys.argv[5]) if len(sys.argv) > 5 else 2000

arch = TdvArch(scales=2, blocks=1, features=8, channels=1)
cfg = TrainConfig(batch_size=8, iterations=iters, lr=lr,
                  lr_halving_period=halving, patch_size=25, steps=10,
                  sigma=25.0 / 255.0, seed=0, T_init=T_init, arch=arch)
images = make_synthetic_images(count=16, size=96, seed=0)
dataset = Dataset(images, patch_size=25)
op = make_identity(1, 25, 25)
loss = LossFn("squared_l2")

os.makedirs(f".probe_{tag}", exist_ok=True)
t0 = time.time()
T, params, log = train(dataset, op, cfg, loss, out_dir=f".probe_{tag}")
secs = time.time() - t0
print(f"[{tag}] train: {secs:.0f}s  T={T:.4f}", flush=True)
print(f"[{tag}] cost: initial={log[0]['cost']:.5f} final={log[-1]['cost']:.5f} "
      f"ratio={log[-1]['cost'] / log[0]['cost']:.3f}", flush=True)

batch = []
for it in range(iters + 1, iters + 5):
    batch.extend(_draw_batch(dataset, op, cfg, it))
value, scale = stopping_time_report(batch, T, params, op, cfg.steps, loss)
print(f"[{tag}] stop: value={value:+.6e} scale={scale:.6e} "
      f"normalized={abs(value) / scale:.4f} (need < 0.05)", flush=True)

held = make_synthetic_images(count=8, size=64, seed=99)
rng = np.random.default_rng(123)
op64 = make_identity(1, 64, 64)
gains = []
for img in held:
    z = img + cfg.sigma * rng.standard_normal(img.shape)
    flow = run_flow(z[None], T, params, op64, cfg.steps)
    gains.append(psnr(flow.states[-1][0], img) - psnr(flow.states[0][0], img))
print(f"[{tag}] mean held-out gain = {np.mean(gains):.2f} dB (need >= 2)",
      flush=True)
print(f"[{tag}] total {time.time() - t0:.0f}s", flush=True)
