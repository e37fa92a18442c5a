"""Truck GPS traces to grid-level activity predictions.

The compiled extension carries the implementation; this package re-exports
it. During development the extension can be picked up from a CMake build
tree via the TRUCKCAST_EXT_DIR environment variable.
"""

import os
import sys

try:
    from truckcast._truckcast import *  # noqa: F401,F403  (installed wheel layout)
    from truckcast._truckcast import __version__  # noqa: F401
except ImportError:  # development tree: extension lives in the CMake build dir
    _ext_dir = os.environ.get("TRUCKCAST_EXT_DIR")
    if _ext_dir and _ext_dir not in sys.path:
        sys.path.insert(0, _ext_dir)
    from _truckcast import *  # noqa: F401,F403
    from _truckcast import __version__  # noqa: F401

__all__ = [
    "__version__",
    "build_grid",
    "default_fixture_config",
    "detect_stay_points",
    "exact_dtw",
    "fast_dtw",
    "generate_trajectories",
    "haversine",
    "label_of",
    "locate",
    "prf",
    "run_pipeline",
    "soft_vote",
]
