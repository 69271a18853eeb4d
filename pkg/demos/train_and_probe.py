"""Train the guided upsampler on the synthetic world and compare linear probes against bilinear.

Uses a shortened schedule so it finishes in well under a minute; pass an iteration count to change it.

    python3 demos/train_and_probe.py [iterations]
"""

import sys
import time

from relguide import evalkit as ek
from relguide.config import RunConfig
from relguide.training import train

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 600
cfg = RunConfig().with_overrides(f"train.iterations = {iters}\ntrain.lr = 1e-3\nprobe.depth_iterations = 60\n")
seed = 0

t = time.perf_counter()
result = train(ek.train_scenes(cfg, seed), cfg.train_config(seed))
rec = [row[2] for row in result.trace]
print(f"trained {iters} iterations in {time.perf_counter() - t:.1f}s; "
      f"loss_rec first 20 {sum(rec[:20]) / 20:.4f}, last 20 {sum(rec[-20:]) / 20:.4f}")

for name, params in (("bilinear", None), ("trained", result.params)):
    r = ek.evaluate(cfg, seed, params, name=name)
    print(f"{name:>8}: mIoU {r.miou:.4f}  pixel acc {r.acc:.4f}  delta1 {r.delta1:.4f}")
