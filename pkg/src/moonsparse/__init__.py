"""Sparse MLP training with an unknown-aware loss, post-hoc OOD scoring and calibration."""

import os as _os

# MOON_THREADS caps BLAS threads; the default of 1 keeps every run bit-reproducible.
_threads = _os.environ.get("MOON_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
    if "MOON_THREADS" in _os.environ or _var not in _os.environ:
        _os.environ[_var] = _threads

__version__ = "0.1.0"
