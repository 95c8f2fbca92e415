"""Writer for the CALD container consumed by the calibration toolkit.

Little-endian binary: magic ``b"CALD"``, version u16 = 1, reserved u16 = 0,
n u64, d u32, k u32, then n*d float32 features row-major, n*k float32
logits row-major, n uint32 labels. No padding, no compression. The layout
is the whole contract between this exporter and the toolkit; nothing else
crosses the boundary.
"""

from __future__ import annotations

import struct

import numpy as np

_MAGIC = b"CALD"
_VERSION = 1
_HEADER = struct.Struct("<4sHHQII")


def write_cald(path, features: np.ndarray, logits: np.ndarray,
               labels: np.ndarray) -> None:
    """Write one dataset to ``path``, validating shapes and finiteness.

    ``features`` is (n, d) and ``logits`` (n, k) float32; ``labels`` is
    (n,) integer. A non-finite value anywhere is a ValueError rather than
    a silent write: the toolkit would reject the file on read, so failing
    here keeps the broken model run visible.
    """
    features = np.ascontiguousarray(features, dtype="<f4")
    logits = np.ascontiguousarray(logits, dtype="<f4")
    labels_arr = np.asarray(labels)
    if features.ndim != 2 or logits.ndim != 2 or labels_arr.ndim != 1:
        raise ValueError("expected features (n, d), logits (n, k), labels (n,)")
    n, d = features.shape
    k = logits.shape[1]
    if logits.shape[0] != n or labels_arr.shape[0] != n:
        raise ValueError(f"row counts disagree: features {n}, "
                         f"logits {logits.shape[0]}, labels {labels_arr.shape[0]}")
    if not np.all(np.isfinite(features)):
        raise ValueError("non-finite feature values; refusing to write")
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logit values; refusing to write")
    if np.any(labels_arr < 0) or np.any(labels_arr >= k):
        raise ValueError(f"labels outside [0, {k})")
    labels_u32 = np.ascontiguousarray(labels_arr, dtype="<u4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, 0, n, d, k))
        fh.write(features.tobytes())
        fh.write(logits.tobytes())
        fh.write(labels_u32.tobytes())
