"""Calibration datasets: the CALD container format, splits, and a synthetic
Gaussian-mixture generator with a known optimal temperature structure.

A calibration dataset is a frozen classifier's view of an evaluation set:
feature embeddings ``phi(x)``, raw logits ``s(x)``, and integer labels. The
on-disk container (CALD) is little-endian binary:

    offset  size        field
    0       4           magic ``b"CALD"``
    4       2           format version, u16 (currently 1)
    6       2           reserved, u16 (must be written as 0)
    8       8           n, u64   number of samples
    16      4           d, u32   feature dimension
    20      4           k, u32   number of classes
    24      n*d*4       features, f32, row-major
    ...     n*k*4       logits, f32, row-major
    ...     n*4         labels, u32

Arrays are held in memory as float64 for numerics, but values are quantized
through float32 at construction so that a write/read round trip is exact to
the byte.
"""

from __future__ import annotations

import dataclasses
import struct

import numpy as np
from scipy.special import logsumexp

from .errors import CaldFormatError, DatasetValidationError

_MAGIC = b"CALD"
_VERSION = 1
_HEADER = struct.Struct("<4sHHQII")


def _quantize_f32(values: np.ndarray) -> np.ndarray:
    """Round float64 values onto the float32 grid (kept as float64)."""
    return np.asarray(values, dtype=np.float32).astype(np.float64)


@dataclasses.dataclass(frozen=True)
class CalibrationDataset:
    """Immutable (features, logits, labels) triple.

    Parameters
    ----------
    features : ndarray, shape (n, d)
    logits : ndarray, shape (n, k)
    labels : ndarray, shape (n,), integer class indices in ``[0, k)``

    Raises
    ------
    DatasetValidationError
        On shape mismatch, ``n < 1``, ``d < 1``, ``k < 2``, non-finite
        values, or out-of-range labels. The message names the first
        offending sample where one exists.
    """

    features: np.ndarray
    logits: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        logits = np.asarray(self.logits, dtype=np.float64)
        labels = np.asarray(self.labels)

        if features.ndim != 2:
            raise DatasetValidationError(
                f"features must be 2-d (n, d), got shape {features.shape}")
        if logits.ndim != 2:
            raise DatasetValidationError(
                f"logits must be 2-d (n, k), got shape {logits.shape}")
        if labels.ndim != 1:
            raise DatasetValidationError(
                f"labels must be 1-d (n,), got shape {labels.shape}")
        n, d = features.shape
        if n < 1:
            raise DatasetValidationError("dataset must contain at least one sample")
        if d < 1:
            raise DatasetValidationError("feature dimension d must be >= 1")
        if logits.shape[0] != n or labels.shape[0] != n:
            raise DatasetValidationError(
                f"row counts differ: features {n}, logits {logits.shape[0]}, "
                f"labels {labels.shape[0]}")
        k = logits.shape[1]
        if k < 2:
            raise DatasetValidationError("number of classes k must be >= 2")
        if not np.issubdtype(labels.dtype, np.integer):
            raise DatasetValidationError(
                f"labels must be integers, got dtype {labels.dtype}")

        bad = np.flatnonzero(~np.all(np.isfinite(features), axis=1))
        if bad.size:
            raise DatasetValidationError(
                f"non-finite feature value at sample {bad[0]}")
        bad = np.flatnonzero(~np.all(np.isfinite(logits), axis=1))
        if bad.size:
            raise DatasetValidationError(
                f"non-finite logit value at sample {bad[0]}")
        bad = np.flatnonzero((labels < 0) | (labels >= k))
        if bad.size:
            raise DatasetValidationError(
                f"label out of range [0, {k}) at sample {bad[0]}")

        features = _quantize_f32(features)
        logits = _quantize_f32(logits)
        labels = labels.astype(np.int64)
        for arr in (features, logits, labels):
            arr.flags.writeable = False
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def k(self) -> int:
        return self.logits.shape[1]


def write_dataset(dataset: CalibrationDataset, path) -> None:
    """Serialize a dataset to a CALD file.

    Instances are validated at construction, so this never writes an
    invalid payload.
    """
    header = _HEADER.pack(_MAGIC, _VERSION, 0, dataset.n, dataset.d, dataset.k)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(dataset.features, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(dataset.logits, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(dataset.labels, dtype="<u4").tobytes())


def read_dataset(path) -> CalibrationDataset:
    """Read a CALD file.

    Raises
    ------
    CaldFormatError
        On bad magic, unsupported version, or a payload whose length does
        not match the header counts.
    DatasetValidationError
        When the decoded arrays violate dataset invariants (for example a
        label >= k, or a non-finite float stored in the file).
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise CaldFormatError(
            f"file is {len(raw)} bytes, shorter than the {_HEADER.size}-byte header")
    magic, version, _reserved, n, d, k = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise CaldFormatError(f"bad magic {magic!r}, expected {_MAGIC!r}")
    if version != _VERSION:
        raise CaldFormatError(f"unsupported format version {version}")

    expected = _HEADER.size + 4 * (n * d + n * k + n)
    if len(raw) < expected:
        raise CaldFormatError(
            f"truncated payload: header declares {expected} bytes, file has {len(raw)}")
    if len(raw) > expected:
        raise CaldFormatError(
            f"trailing bytes: header declares {expected} bytes, file has {len(raw)}")

    offset = _HEADER.size
    features = np.frombuffer(raw, dtype="<f4", count=n * d, offset=offset)
    offset += 4 * n * d
    logits = np.frombuffer(raw, dtype="<f4", count=n * k, offset=offset)
    offset += 4 * n * k
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=offset)

    return CalibrationDataset(
        features=features.astype(np.float64).reshape(n, d),
        logits=logits.astype(np.float64).reshape(n, k),
        labels=labels.astype(np.int64),
    )


def take(dataset: CalibrationDataset, indices) -> CalibrationDataset:
    """Row-subset a dataset by an index array (order preserved)."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.ndim != 1 or indices.size == 0:
        raise DatasetValidationError("indices must be a non-empty 1-d array")
    if indices.min() < 0 or indices.max() >= dataset.n:
        raise DatasetValidationError("index out of range for dataset")
    return CalibrationDataset(
        features=dataset.features[indices],
        logits=dataset.logits[indices],
        labels=dataset.labels[indices],
    )


@dataclasses.dataclass(frozen=True)
class DatasetSplit:
    """Disjoint index sets produced by :func:`split_dataset`."""

    train_indices: np.ndarray
    holdout_indices: np.ndarray


def split_dataset(dataset: CalibrationDataset, holdout_fraction: float,
                  seed: int) -> DatasetSplit:
    """Random train/holdout split.

    The permutation comes from ``numpy.random.Generator(PCG64(seed))``, so a
    given (dataset size, fraction, seed) triple always yields the same
    split. The holdout size is ``round(holdout_fraction * n)`` (Python
    banker's rounding), clamped to ``[1, n - 1]`` so neither side is empty.
    """
    if not 0.0 < holdout_fraction < 1.0:
        raise DatasetValidationError(
            f"holdout_fraction must lie in (0, 1), got {holdout_fraction}")
    n = dataset.n
    if n < 2:
        raise DatasetValidationError("cannot split a dataset with fewer than 2 samples")
    n_holdout = min(max(int(round(holdout_fraction * n)), 1), n - 1)
    perm = np.random.Generator(np.random.PCG64(seed)).permutation(n)
    return DatasetSplit(
        train_indices=np.sort(perm[n_holdout:]),
        holdout_indices=np.sort(perm[:n_holdout]),
    )


@dataclasses.dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic miscalibrated classifier.

    Data are drawn from a k-component axis-aligned Gaussian mixture; the
    class of a sample is drawn from the exact mixture posterior at its
    feature vector, so the posterior itself is the Bayes-optimal predictor.
    The emitted logits are ``inflation[j] * log_posterior(x)`` for a sample
    generated by cluster j. Dividing those logits by ``inflation[j]``
    recovers the posterior exactly, so the optimal temperature for cluster
    j's samples is known by construction: it is ``inflation[j]``.

    Attributes
    ----------
    n : int
        Number of samples.
    means, stds : ndarray, shape (k, d)
        Per-cluster component means and standard deviations (all > 0).
    weights : ndarray, shape (k,)
        Mixture weights (positive, summing to 1 within 1e-9).
    inflations : ndarray, shape (k,)
        Per-cluster confidence inflation factors (all > 0).
    """

    n: int
    means: np.ndarray
    stds: np.ndarray
    weights: np.ndarray
    inflations: np.ndarray

    def __post_init__(self):
        means = np.array(self.means, dtype=np.float64)
        if means.ndim != 2:
            raise DatasetValidationError(
                f"means must be 2-d (k, d), got shape {means.shape}")
        k, d = means.shape
        stds = np.array(self.stds, dtype=np.float64)
        weights = np.array(self.weights, dtype=np.float64)
        inflations = np.array(self.inflations, dtype=np.float64)
        if self.n < 1:
            raise DatasetValidationError("n must be >= 1")
        if k < 2 or d < 1:
            raise DatasetValidationError("need k >= 2 clusters and d >= 1 dimensions")
        if stds.shape != (k, d):
            raise DatasetValidationError(
                f"stds shape {stds.shape} does not match means shape {means.shape}")
        if weights.shape != (k,) or inflations.shape != (k,):
            raise DatasetValidationError(
                "weights and inflations must have shape (k,)")
        if not (np.all(np.isfinite(means)) and np.all(np.isfinite(stds))
                and np.all(np.isfinite(weights)) and np.all(np.isfinite(inflations))):
            raise DatasetValidationError("spec parameters must be finite")
        if np.any(stds <= 0) or np.any(inflations <= 0) or np.any(weights <= 0):
            raise DatasetValidationError(
                "stds, weights and inflations must be strictly positive")
        if abs(weights.sum() - 1.0) > 1e-9:
            raise DatasetValidationError(
                f"weights must sum to 1, got {weights.sum()!r}")
        for name, arr in (("means", means), ("stds", stds),
                          ("weights", weights), ("inflations", inflations)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def k(self) -> int:
        return self.means.shape[0]

    @property
    def d(self) -> int:
        return self.means.shape[1]


def two_cluster_spec(n: int, inflation_a: float, inflation_b: float,
                     separation: float = 2.5, d: int = 2,
                     std_a: float = 1.0, std_b: float = 0.6,
                     weight_b: float = 0.4) -> SyntheticSpec:
    """Two clusters at ``+-separation/2`` along axis 0.

    The defaults describe a broad majority cluster with a tighter minority
    cluster b. With unequal inflations that shape gives a constant
    temperature genuinely ambiguous targets: cluster b owns enough of the
    moderate-confidence region that no single temperature can flatten both
    reliability profiles, while the clusters stay distinct enough for a
    per-sample temperature map to tell them apart.
    """
    means = np.zeros((2, d))
    means[0, 0] = -separation / 2.0
    means[1, 0] = +separation / 2.0
    stds = np.stack([np.full(d, std_a), np.full(d, std_b)])
    return SyntheticSpec(
        n=n,
        means=means,
        stds=stds,
        weights=np.array([1.0 - weight_b, weight_b]),
        inflations=np.array([inflation_a, inflation_b], dtype=np.float64),
    )


def _mixture_log_posterior(spec: SyntheticSpec, x: np.ndarray) -> np.ndarray:
    """Exact log p(cluster | x) under the spec's mixture, shape (n, k)."""
    # log w_j + sum_d log N(x_d; mu_jd, sigma_jd), computed per cluster
    diff = (x[:, None, :] - spec.means[None, :, :]) / spec.stds[None, :, :]
    log_joint = (np.log(spec.weights)[None, :]
                 - np.sum(np.log(spec.stds), axis=1)[None, :]
                 - 0.5 * spec.d * np.log(2.0 * np.pi)
                 - 0.5 * np.sum(diff * diff, axis=2))
    return log_joint - logsumexp(log_joint, axis=1, keepdims=True)


def generate_synthetic(spec: SyntheticSpec, seed: int):
    """Draw a synthetic dataset; returns ``(dataset, clusters)``.

    ``clusters`` is the (n,) array of generating cluster indices, kept
    separate from the dataset because the classifier under study would not
    see it. Draw order is fixed (clusters, then feature noise, then label
    uniforms) so a seed pins the sample exactly.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    clusters = rng.choice(spec.k, size=spec.n, p=spec.weights)
    noise = rng.standard_normal((spec.n, spec.d))
    features = spec.means[clusters] + spec.stds[clusters] * noise

    log_post = _mixture_log_posterior(spec, features)
    # inverse-CDF draw of the label from the exact posterior
    cdf = np.cumsum(np.exp(log_post), axis=1)
    cdf[:, -1] = 1.0
    u = rng.random(spec.n)
    labels = np.sum(u[:, None] >= cdf, axis=1).astype(np.int64)

    logits = spec.inflations[clusters][:, None] * log_post
    dataset = CalibrationDataset(features=features, logits=logits, labels=labels)
    return dataset, clusters
