"""Hot inner loops with a numba path and a vectorized numpy path.

``PHYSFACE_NUMBA=0`` selects the numpy implementations; both are always
importable so they can be cross-checked and benchmarked against each other.
"""
from .._jit import USE_NUMBA
from .local import project_rotations_numba, project_rotations_numpy
from .contact import (
    pair_barrier_numba,
    pair_barrier_numpy,
    pair_distance_numba,
    pair_distance_numpy,
)
from .ccd import pair_toi_numba, pair_toi_numpy

project_rotations = project_rotations_numba if USE_NUMBA else project_rotations_numpy
pair_distance = pair_distance_numba if USE_NUMBA else pair_distance_numpy
pair_barrier = pair_barrier_numba if USE_NUMBA else pair_barrier_numpy
pair_toi = pair_toi_numba if USE_NUMBA else pair_toi_numpy

__all__ = [
    "USE_NUMBA",
    "project_rotations",
    "project_rotations_numba",
    "project_rotations_numpy",
    "pair_distance",
    "pair_distance_numba",
    "pair_distance_numpy",
    "pair_barrier",
    "pair_barrier_numba",
    "pair_barrier_numpy",
    "pair_toi",
    "pair_toi_numba",
    "pair_toi_numpy",
]
