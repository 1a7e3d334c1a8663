"""Synthetic decoder stack used as the prefill/decode workload.

Each layer is ``x + W_down @ silu(W_up @ rms_norm(x))`` with Q8 weights.
There is no attention: the stack exists to drive the norm and Int8 dot
kernels the way a real decoder does, batched (GEMM) during prefill and
one token at a time (GEMV) during decode.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from qf.kernels import NormConfig, matmul_q8, matvec_q8, rms_norm_f32
from qf.quant import QK, QMatrix, ScaleFormat


class NumericDivergenceError(ArithmeticError):
    pass


@dataclass
class LayerWeights:
    w_up: QMatrix    # ffn_dim x hidden_dim
    w_down: QMatrix  # hidden_dim x ffn_dim
    norm_eps: float = 1e-5

    def __post_init__(self):
        ffn, hidden = self.w_up.shape
        if self.w_down.shape != (hidden, ffn):
            raise ValueError(
                f"w_down is {self.w_down.shape}, expected {(hidden, ffn)} to follow w_up {self.w_up.shape}"
            )

    @property
    def nbytes(self) -> int:
        return self.w_up.nbytes + self.w_down.nbytes


@dataclass
class ToyModel:
    layers: list[LayerWeights]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a model needs at least one layer")
        dims = {(l.w_up.shape, l.w_down.shape) for l in self.layers}
        if len(dims) != 1:
            raise ValueError("all layers must share dimensions")

    @property
    def hidden_dim(self) -> int:
        return self.layers[0].w_up.shape[1]

    @property
    def ffn_dim(self) -> int:
        return self.layers[0].w_up.shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def scale_format(self) -> ScaleFormat:
        return self.layers[0].w_up.scale_format

    @property
    def nbytes(self) -> int:
        return sum(l.nbytes for l in self.layers)


def synthetic_weights(hidden_dim: int, ffn_dim: int, n_layers: int, seed: int = 0):
    """Float32 weight pairs drawn from N(0, 1/fan_in), reproducible by seed."""
    if hidden_dim % QK or ffn_dim % QK:
        raise ValueError(f"dims must be multiples of {QK}: hidden={hidden_dim}, ffn={ffn_dim}")
    if n_layers < 1:
        raise ValueError("n_layers must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_layers):
        up = rng.standard_normal((ffn_dim, hidden_dim), dtype=np.float32) / np.float32(np.sqrt(hidden_dim))
        down = rng.standard_normal((hidden_dim, ffn_dim), dtype=np.float32) / np.float32(np.sqrt(ffn_dim))
        out.append((up, down))
    return out


def build_model(weights, scale_format: ScaleFormat | str = ScaleFormat.F16S, norm_eps: float = 1e-5) -> ToyModel:
    return ToyModel([
        LayerWeights(QMatrix.from_float(up, scale_format), QMatrix.from_float(down, scale_format), norm_eps)
        for up, down in weights
    ])


def build_toy_model(hidden_dim: int, ffn_dim: int, n_layers: int,
                    scale_format: ScaleFormat | str = ScaleFormat.F16S,
                    seed: int = 0, norm_eps: float = 1e-5) -> ToyModel:
    return build_model(synthetic_weights(hidden_dim, ffn_dim, n_layers, seed), scale_format, norm_eps)


def silu(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float32)
    with np.errstate(over="ignore"):
        return t / (np.float32(1.0) + np.exp(-t))


def layer_forward(w: LayerWeights, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if x.shape != (w.w_up.shape[1],):
        raise ValueError(f"input has shape {x.shape}, layer expects ({w.w_up.shape[1]},)")
    h = rms_norm_f32(x, NormConfig(w.norm_eps))
    a = silu(matvec_q8(w.w_up, h))
    return x + matvec_q8(w.w_down, a)


def layer_forward_batch(w: LayerWeights, xs: np.ndarray, threads: int | None = None) -> np.ndarray:
    cfg = NormConfig(w.norm_eps)
    h = np.stack([rms_norm_f32(row, cfg) for row in xs])
    a = silu(matmul_q8(w.w_up, h, threads))
    return xs + matmul_q8(w.w_down, a, threads)


def forward(model: ToyModel, x) -> np.ndarray:
    """One token through every layer (the decode-step workload)."""
    for layer in model.layers:
        x = layer_forward(layer, x)
    return x


def prefill(model: ToyModel, xs, threads: int | None = None) -> tuple[np.ndarray, float]:
    """Run a batch of tokens through the stack; returns ``(outputs, seconds)``."""
    xs = np.ascontiguousarray(xs, dtype=np.float32)
    if xs.ndim != 2 or xs.shape[0] < 1 or xs.shape[1] != model.hidden_dim:
        raise ValueError(f"expected shape (m >= 1, {model.hidden_dim}), got {xs.shape}")
    start = time.perf_counter()
    for layer in model.layers:
        xs = layer_forward_batch(layer, xs, threads)
    return xs, time.perf_counter() - start


def _unit_rms(x: np.ndarray) -> np.ndarray:
    rms = np.float32(np.sqrt(np.mean(x.astype(np.float64) ** 2)))
    return x if rms == 0 else x / rms


def decode_loop(model: ToyModel, x0, steps: int) -> tuple[np.ndarray, list[float]]:
    """Feed each step's output back as the next input.

    Between steps the state is rescaled to unit RMS so values cannot drift;
    the first step sees ``x0`` untouched and the returned row is the last
    step's raw output. Returns ``(final_row, per_step_seconds)``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.asarray(x0, dtype=np.float32)
    if x.shape != (model.hidden_dim,):
        raise ValueError(f"x0 has shape {x.shape}, model expects ({model.hidden_dim},)")
    times = []
    for step in range(steps):
        if step:
            x = _unit_rms(x)
        t0 = time.perf_counter()
        x = forward(model, x)
        times.append(time.perf_counter() - t0)
        if not np.isfinite(x).all():
            raise NumericDivergenceError(f"state became non-finite at step {step}")
    return x, times
