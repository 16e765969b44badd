"""Backend selection for the hot AUROC kernel.

The Cython build is used when it imports; otherwise the numpy version is
used. Set ``CXRTRUNC_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
auc_presorted_batch = _kernels_py.auc_presorted_batch

if not os.environ.get("CXRTRUNC_PURE_PYTHON"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        BACKEND = "cython"
        auc_presorted_batch = _compiled.auc_presorted_batch

__all__ = ["BACKEND", "auc_presorted_batch"]
