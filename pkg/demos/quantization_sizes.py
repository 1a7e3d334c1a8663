# %% [markdown]
# # Q8 blocks and what they cost
#
# Every 32 values share one scale `d = max|x| / 127`. The scale is stored
# either as binary16 (34-byte blocks) or float32 (36-byte blocks).

# %%
import numpy as np

from qf import TensorFormat, container_bytes, dequantize_row, quantize_row
from qf.quant import block_scales

rng = np.random.default_rng(0)
x = rng.standard_normal(4096).astype(np.float32)

for fmt in ("f16", "f32"):
    blocks, stats = quantize_row(x, scale_format=fmt)
    print(f"{fmt}: {blocks.nbytes} bytes, max err {stats.max_abs_err:.2e}, rmse {stats.rmse:.2e}")

# %% [markdown]
# The error bound per element is half a quant step.

# %%
blocks, _ = quantize_row(x, scale_format="f16")
err = np.abs(x - dequantize_row(blocks)).reshape(-1, 32)
d = block_scales(blocks)[:, None]
print("worst err / (d/2):", float((err / (d / 2)).max()))

# %% [markdown]
# Sizes are pure arithmetic.

# %%
n = 4096 * 4096
for fmt in TensorFormat:
    print(f"{fmt.name:<8}{container_bytes(n, fmt):>14,d}")
f16s = container_bytes(n, TensorFormat.Q8_F16S)
f32s = container_bytes(n, TensorFormat.Q8_F32S)
print(f"Q8_F32S / Q8_F16S = {f32s / f16s:.6f}")
