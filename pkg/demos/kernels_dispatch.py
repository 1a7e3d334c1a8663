# %% [markdown]
# # Kernels and runtime dispatch
#
# Each operator has a scalar reference and a vectorized variant. The
# dispatcher binds the vectorized one when numpy reports SIMD support,
# unless QF_FORCE_SCALAR=1 is set.

# %%
import time

import numpy as np

from qf.kernels import detect_features, matvec_q8, use_kernels, vec_dot_q8
from qf.quant import QMatrix, count_scale_decodes, quantize_row

ks = detect_features()
print(ks.summary())

# %% [markdown]
# With f32 scales the dot product never touches a binary16 decode.

# %%
x = np.random.default_rng(1).standard_normal(4096).astype(np.float32)
for fmt in ("f16", "f32"):
    a, _ = quantize_row(x, scale_format=fmt)
    with count_scale_decodes() as c:
        vec_dot_q8(a, a)
    print(f"{fmt}: {c.count} scale decodes for {len(a)} blocks")

# %% [markdown]
# Scalar against vectorized on one 1024x512 matvec.

# %%
w = QMatrix.from_float(np.random.default_rng(2).standard_normal((1024, 512)).astype(np.float32))
v = np.random.default_rng(3).standard_normal(512).astype(np.float32)
out = {}
for mode in ("scalar", "auto"):
    with use_kernels(detect_features(mode)):
        matvec_q8(w, v)
        t0 = time.perf_counter()
        for _ in range(20):
            out[mode] = matvec_q8(w, v)
        print(f"{mode:>6}: {(time.perf_counter() - t0) / 20 * 1e6:8.0f} us")
print("bit-identical:", bool((out["scalar"] == out["auto"]).all()))
