"""Pure-Python/numpy versions of the routines in ``_kernels.pyx``."""

import numpy as np
from scipy import ndimage


def window_sums(padded, num_classes, weights):
    padded = np.asarray(padded, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    ph, pw = weights.shape
    h = padded.shape[0] - ph + 1
    w = padded.shape[1] - pw + 1
    if h < 1 or w < 1:
        raise ValueError("padded map smaller than the window")
    if padded.min() < 0 or padded.max() >= num_classes:
        raise ValueError("label outside [0, num_classes)")
    indicator = np.eye(num_classes, dtype=np.float64)[padded]
    out = np.zeros((h, w, num_classes), dtype=np.float64)
    # same offset order as the compiled loop; adding 0.0 leaves sums unchanged
    for i in range(ph):
        for j in range(pw):
            out += weights[i, j] * indicator[i:i + h, j:j + w]
    return out


def distance_to_mask(mask):
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.full(mask.shape, np.inf)
    return ndimage.distance_transform_edt(~mask)
