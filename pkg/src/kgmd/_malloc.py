"""Process-level performance tuning for the numpy-heavy training loop.

Raises glibc malloc thresholds so multi-megabyte numpy buffers are reused:
without this, buffers above the dynamic mmap threshold (32 MiB cap, and much
lower early in a process) are returned to the kernel on free and every
reallocation pays page-zeroing costs; the training loop reallocates such
buffers hundreds of times per iteration.  Also caps BLAS threading at one
thread: the GEMMs here are small enough that thread synchronization loses
more than it gains.  Both are no-ops where unsupported.
"""

import ctypes
import ctypes.util
import sys

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3


def raise_malloc_thresholds(limit: int = 256 * 1024 * 1024) -> bool:
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6",
                           use_errno=True)
        ok1 = libc.mallopt(_M_MMAP_THRESHOLD, limit)
        ok2 = libc.mallopt(_M_TRIM_THRESHOLD, limit)
        return bool(ok1 and ok2)
    except (OSError, AttributeError):
        return False


def limit_blas_threads(n: int = 1) -> bool:
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return False
    threadpool_limits(limits=n, user_api="blas")
    return True
