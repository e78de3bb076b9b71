"""Process-level performance knobs applied once at import.

Two pathologies dominate this workload on small machines if left alone:

* glibc hands large freed buffers straight back to the kernel, so every
  fresh multi-megabyte activation array pays mmap page faults that cost
  more than the arithmetic on it.  Raising the mmap threshold and
  disabling trim keeps those buffers on the heap for reuse.
* OpenBLAS worker threads spin-wait after every GEMM and starve the
  numba/numpy work that directly follows each convolution.  Single-threaded
  BLAS is faster end to end here, and it removes a source of run-to-run
  timing jitter.

Both knobs only affect speed, never results.  Best effort on non-glibc
platforms.
"""

import ctypes

import numpy  # noqa: F401  (loads the BLAS the thread limit below applies to)

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3


def tune_allocator() -> bool:
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(_M_MMAP_THRESHOLD, 1 << 30)
        libc.mallopt(_M_TRIM_THRESHOLD, 0x7FFFFFFF)
        return True
    except (OSError, AttributeError):
        return False


def limit_blas_threads() -> bool:
    try:
        from threadpoolctl import ThreadpoolController

        ThreadpoolController().limit(limits=1, user_api="blas")
        return True
    except Exception:
        return False


allocator_tuned = tune_allocator()
blas_limited = limit_blas_threads()
