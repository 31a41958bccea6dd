"""Open-world graph condensation toolkit.

Condenses an evolving sequence of graph snapshots into a small synthetic
node-feature set via closed-form kernel ridge regression with a temporal
invariance penalty, then evaluates downstream classifiers across future
tasks under open-set recognition.
"""

import os
import sys

# BLAS thread caps must land before numpy loads its backend.  OPENGC_THREADS
# defaults to 1 so single-process runs are reproducible; set it higher to
# trade determinism for speed.
if "numpy" not in sys.modules:
    _threads = os.environ.get("OPENGC_THREADS", "1")
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)
    del _threads, _var

from .errors import DataError, NumericalError, UsageError

__version__ = "0.1.0"

__all__ = ["DataError", "NumericalError", "UsageError", "__version__"]
