"""Select the compiled kernel module if available, else the numpy fallback."""
import os

if os.environ.get("GPMIA_PURE_PYTHON", "") not in ("", "0"):
    from gpmia import _pykernels as kernels
else:
    try:
        from gpmia import _ckernels as kernels
    except ImportError:  # extension not built
        from gpmia import _pykernels as kernels

BACKEND = kernels.BACKEND
