"""Sequential attend-infer-repeat: object-level generative modelling of image sequences."""
import os

# SQAIR_THREADS caps worker threads of the numerical backend; must be set before numpy loads
_threads = os.environ.get("SQAIR_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
