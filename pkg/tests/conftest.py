"""Pin BLAS/OpenMP pools to one thread before numpy is first imported.

The timed end-to-end checks in test_acceptance.py promise single-core
runtimes, and multi-threaded GEMM would both blur those measurements and
perturb summation order.
"""

import os

for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")
