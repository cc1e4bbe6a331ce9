"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the pure-Python
mirror is used. Set ``TOKENPGD_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

if os.environ.get("TOKENPGD_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = _impl.BACKEND
project_c1 = _impl.project_c1
project_c2 = _impl.project_c2
project_c2_rows = _impl.project_c2_rows
uniform_block = _impl.uniform_block
splitmix64 = _kernels_py.splitmix64


def compiled_available():
    try:
        from . import _kernels  # noqa: F401
    except ImportError:
        return False
    return True
