"""Backend selection for the hot consensus kernel.

The compiled extension is preferred when present; ``NEGMERGE_BACKEND`` forces
a choice (``ext`` or ``numpy``).  Both backends are bit-identical, so the
selection only affects speed.
"""

import os

_choice = os.environ.get("NEGMERGE_BACKEND", "auto").lower()
if _choice not in ("auto", "ext", "numpy"):
    raise ValueError(f"NEGMERGE_BACKEND must be auto/ext/numpy, got {_choice!r}")

if _choice == "numpy":
    from . import _fallback as _impl

    BACKEND = "numpy"
else:
    try:
        from . import _consensus as _impl  # type: ignore[attr-defined]

        BACKEND = "ext"
    except ImportError:
        if _choice == "ext":
            raise
        from . import _fallback as _impl

        BACKEND = "numpy"

update_consensus = _impl.update_consensus


def thread_count(requested=None):
    """Resolve the worker count: explicit value, NEGMERGE_THREADS, else CPU count."""
    if requested is not None:
        return max(1, int(requested))
    env = os.environ.get("NEGMERGE_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1
