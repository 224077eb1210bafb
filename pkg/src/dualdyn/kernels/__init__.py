"""Kernel backend selection.

The tape executes its dense ops through whichever module is bound to ``impl``
here.  By default the compiled Cython extension is preferred and the numpy
reference is the fallback; DUALDYN_KERNELS=reference|compiled|auto overrides.
"""

import os

from dualdyn.kernels import _reference

_choice = os.environ.get("DUALDYN_KERNELS", "auto")
if _choice == "reference":
    impl = _reference
elif _choice == "compiled":
    from dualdyn.kernels import _fastcore as impl
elif _choice == "auto":
    try:
        from dualdyn.kernels import _fastcore as impl
    except ImportError:
        impl = _reference
else:
    raise ValueError(
        f"DUALDYN_KERNELS must be 'auto', 'compiled' or 'reference', got {_choice!r}"
    )

BACKEND = "reference" if impl is _reference else "compiled"


def get_impl(name):
    """Fetch a specific backend by name ('reference' or 'compiled')."""
    if name == "reference":
        return _reference
    if name == "compiled":
        from dualdyn.kernels import _fastcore

        return _fastcore
    raise ValueError(f"unknown kernel backend {name!r}")
