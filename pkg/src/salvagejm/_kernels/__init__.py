"""Hot numeric kernels: compiled Cython core with a pure-numpy fallback.

The backend is picked once at import. Set SALVAGEJM_PURE_PYTHON=1 to force
the fallback (used by the benchmark and the parity tests).
"""

import os

if os.environ.get("SALVAGEJM_PURE_PYTHON"):
    from ._ref import BACKEND, design_matrix, find_spans
else:
    try:
        from ._fast import BACKEND, design_matrix, find_spans
    except ImportError:
        from ._ref import BACKEND, design_matrix, find_spans

__all__ = ["BACKEND", "design_matrix", "find_spans"]
