"""The eight flip/rotation symmetries of a square, as array operations.

Transform ids: 0 identity, 1-3 counter-clockwise rotations by 90/180/270
degrees, 4-7 a left-right flip followed by rotation ``id - 4``. Internally an id
is the pair (flip, k) acting as ``x -> rot^k(flip^f(x))``.
"""

import numpy as np

from patchforge.errors import ShapeError

ALL_TRANSFORMS = tuple(range(8))
NAMES = ("identity", "rot90", "rot180", "rot270", "flip", "flip_rot90", "flip_rot180", "flip_rot270")


def _split(t: int):
    if t not in ALL_TRANSFORMS:
        raise ValueError(f"dihedral transform id must be in 0..7, got {t!r}")
    return t // 4, t % 4


def compose(a: int, b: int) -> int:
    """Id of the transform "apply ``b``, then ``a``"."""
    fa, ka = _split(a)
    fb, kb = _split(b)
    # flip . rot^k == rot^-k . flip
    k = (ka + (kb if fa == 0 else -kb)) % 4
    return 4 * ((fa + fb) % 2) + k


def inverse(t: int) -> int:
    f, k = _split(t)
    if f:
        return t
    return (4 - k) % 4


def transposes_axes(t: int) -> bool:
    return _split(t)[1] % 2 == 1


def apply_array(pixels: np.ndarray, t: int) -> np.ndarray:
    """Apply transform ``t`` to an (H, W[, C]) array, returning a contiguous copy."""
    f, k = _split(t)
    if k % 2 == 1 and pixels.shape[0] != pixels.shape[1]:
        raise ShapeError(f"transform {NAMES[t]} needs a square patch, got {pixels.shape[0]}x{pixels.shape[1]}")
    out = pixels[:, ::-1] if f else pixels
    out = np.rot90(out, k, axes=(0, 1))
    return np.ascontiguousarray(out)
