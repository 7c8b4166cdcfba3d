"""Bit-level sparsity quantization for small neural networks."""

import os

# Thread caps must be in place before numpy loads its BLAS.
_threads = os.environ.get("BITSIFT_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
