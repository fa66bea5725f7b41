"""Hot numerical kernels with a compiled backend and a numpy fallback.

The compiled extension is preferred when importable. Setting the environment
variable ``SNAC_PURE_PYTHON=1`` forces the fallback.
"""
import os

from . import _gravity_py

BACKEND = "python"
sh_accel_body = _gravity_py.sh_accel_body

if os.environ.get("SNAC_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _gravity_cy
    except ImportError:
        pass
    else:
        sh_accel_body = _gravity_cy.sh_accel_body
        BACKEND = "cython"

__all__ = ["BACKEND", "sh_accel_body"]
