# %% [markdown]
# # binary16 codec
#
# Half floats are handled as raw 16-bit patterns. Decoding is exact;
# encoding rounds to nearest, ties to even.

# %%
import numpy as np

from qf import f16_decode, f16_encode, f16_to_f32_row, f32_to_f16_row

for bits in (0x0000, 0x3C00, 0x7BFF, 0x0001, 0x7C00):
    print(f"0x{bits:04X} -> {f16_decode(bits)!r}")

# %% [markdown]
# Rounding at the top of the range: 65519 still fits, 65520 is the tie
# between 65504 and the next step (which would be 65536), and even-rounding
# sends it to infinity.

# %%
for x in (65504.0, 65519.0, 65520.0, 1e9):
    print(f"{x:>10} -> 0x{f16_encode(x):04X}")

# %% [markdown]
# Row conversions use whatever kernel the dispatcher picked. Every one of
# the 65,536 patterns survives the round trip (NaNs stay NaN).

# %%
patterns = np.arange(1 << 16, dtype=np.uint16)
values = f16_to_f32_row(patterns)
again = f32_to_f16_row(values)
nan = np.isnan(values)
print("non-NaN patterns preserved:", bool((again[~nan] == patterns[~nan]).all()))
print("NaN patterns:", int(nan.sum()))

# %%
# same answers as numpy's own float16
print("matches numpy:", bool((values[~nan] == patterns[~nan].view(np.float16).astype(np.float32)).all()))
