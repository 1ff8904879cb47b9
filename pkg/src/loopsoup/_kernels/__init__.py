"""Hot-kernel backend selection.

Two interchangeable backends implement the same numeric contracts:

* ``_core``   -- Cython extension (preferred; built by setup.py)
* ``_pycore`` -- pure Python + numpy reference implementation

The compiled backend is selected at import time when available.  Set
``LOOPSOUP_BACKEND=python`` or ``LOOPSOUP_BACKEND=compiled`` to force one.
Both backends are written to produce bit-identical results for identical
inputs (same IEEE double operations in the same order per element); the
test suite asserts this parity, and ``loopsoup.benchmarks`` compares their
throughput.
"""

from __future__ import annotations

import os

_requested = os.environ.get("LOOPSOUP_BACKEND", "auto")
if _requested not in ("auto", "compiled", "python"):
    raise ImportError(
        f"LOOPSOUP_BACKEND must be auto|compiled|python, got {_requested!r}")

if _requested == "python":
    from . import _pycore as impl
    BACKEND = "python"
else:
    try:
        from . import _core as impl  # type: ignore[attr-defined]
        BACKEND = "compiled"
    except ImportError:
        if _requested == "compiled":
            raise
        from . import _pycore as impl
        BACKEND = "python"

seg_seg_distance = impl.seg_seg_distance
polyline_min_distance = impl.polyline_min_distance
polyline_point_distance = impl.polyline_point_distance
ProximityGrid = impl.ProximityGrid
walk_out_block = impl.walk_out_block
walk_in_block = impl.walk_in_block
attached_sweep = impl.attached_sweep
scan_back_geq = impl.scan_back_geq
scan_fwd_leq = impl.scan_fwd_leq
scan_fwd_geq = impl.scan_fwd_geq
gap_exceeds = impl.gap_exceeds
piece_pair_disjoint = impl.piece_pair_disjoint


def backend_name() -> str:
    return BACKEND
