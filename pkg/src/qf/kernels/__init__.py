from qf.kernels.dispatch import (
    KernelBinding,
    KernelSet,
    detect_features,
    get_kernels,
    host_simd_features,
    set_kernels,
    use_kernels,
    worker_threads,
)
from qf.kernels.ops import (
    DEFAULT_NORM,
    NormConfig,
    dot_partials_q8,
    matmul_q8,
    matvec_q8,
    norm_f32,
    rms_norm_f32,
    vec_dot_q8,
)

__all__ = [
    "DEFAULT_NORM",
    "KernelBinding",
    "KernelSet",
    "NormConfig",
    "detect_features",
    "dot_partials_q8",
    "get_kernels",
    "host_simd_features",
    "matmul_q8",
    "matvec_q8",
    "norm_f32",
    "rms_norm_f32",
    "set_kernels",
    "use_kernels",
    "vec_dot_q8",
    "worker_threads",
]
