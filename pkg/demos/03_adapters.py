"""The four adaptation methods on one frozen weight matrix, side by side.

Run from the repo root:  python3 demos/03_adapters.py
"""

import numpy as np

from qradapt import (
    RankPolicy,
    build_full_ft_adapter,
    build_lora_adapter,
    build_qr_adapter,
    build_svd_lora_adapter,
)

rng = np.random.default_rng(3)
w0 = rng.normal(size=(32, 32))

qr = build_qr_adapter(w0, RankPolicy.energy(0.5))
lora = build_lora_adapter(w0, rank=2, rng=rng)
svd = build_svd_lora_adapter(w0, rank=2, k=1, alpha=2.0)
full = build_full_ft_adapter(w0)

print(f"{'method':10s} {'trainable':>9s}  starts as a no-op?")
for name, ad in (("qr_lora", qr), ("lora", lora), ("svd_lora", svd), ("full_ft", full)):
    noop = np.array_equal(ad.effective_weight(), w0)
    print(f"{name:10s} {ad.trainable_count:9d}  {noop}")

# the qr adapter trains one scalar per retained basis direction; pushing all
# of them from 0 to 1 at full rank rebuilds the frozen weight exactly
probe = build_qr_adapter(w0, RankPolicy.fixed(w0.shape[0]))
probe.lam[:] = 1.0
print(f"\nfull rank, all coefficients 1: |delta - W0|_max = "
      f"{np.abs(probe.delta_w() - w0).max():.2e}")

# gradients arrive as d loss / d effective_weight and each adapter projects
# them onto its own trainables
g = rng.normal(size=w0.shape)
print("\ngradient tensors per method:")
for name, ad in (("qr_lora", qr), ("lora", lora), ("full_ft", full)):
    shapes = {k: v.shape for k, v in ad.grad_trainables(g).items()}
    print(f"  {name:10s} {shapes}")
