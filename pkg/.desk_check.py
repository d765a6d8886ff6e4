import time

import numpy as np

from tdv.dataset import Dataset, make_synthetic_images
from tdv.flow import run_flow
from tdv.operators import make_identity
from tdv.regularizer import TdvArch
from tdv.training import (LossFn, TrainConfig, _draw_batch,
                          stopping_time_report, train)

t0 = time.time()
arch = TdvArch(scales=2, blocks=1, features=8, channels=1)
cfg = TrainConfig(batch_size=8, iterations=2000, lr=4e-4, patch_size=25,
                  steps=10, sigma=25.0 / 255.0, seed=0, T_init=0.1,
                  arch=arch)
images = make_synthetic_images(count=16, size=96, channels=1, seed=0)
dataset = Dataset(images=images, patch_size=25)
op = make_identity(1, 25, 25)
loss = LossFn("squared_l2")
T, params, log = train(dataset, op, cfg, loss)
train_secs = time.time() - t0
print(f"train: {train_secs:.0f}s  T={T:.4f}")
print(f"cost: initial={log[0]['cost']:.5f} final={log[-1]['cost']:.5f} "
      f"ratio={log[-1]['cost'] / log[0]['cost']:.3f}")

# held-out PSNR
held = make_synthetic_images(count=8, size=64, channels=1, seed=99)
op_eval = make_identity(1, 64, 64)
rng = np.random.default_rng(123)
gain = []
for y in held:
    z = y + cfg.sigma * rng.standard_normal(y.shape)
    flow = run_flow(z[None], T, params, op_eval, cfg.steps, record=False)
    mse0 = float(np.mean((z - y) ** 2))
    mse1 = float(np.mean((flow.output[0] - y) ** 2))
    gain.append(10 * np.log10(mse0 / mse1))
print(f"held-out PSNR gain per image: {np.round(gain, 2)}")
print(f"mean gain = {np.mean(gain):.2f} dB (need >= 2)")

# stopping condition at the trained controls
batch = _draw_batch(dataset, op, cfg, cfg.iterations + 1)
for _ in range(3):
    pass
big = []
for it in (2001, 2002, 2003, 2004):
    big.extend(_draw_batch(dataset, op, cfg, it))
value, scale = stopping_time_report(big, T, params, op, cfg.steps, loss)
print(f"stop: value={value:.6e} scale={scale:.6e} "
      f"normalized={abs(value) / scale:.4f} (need < 0.05)")
print(f"total {time.time() - t0:.0f}s")
