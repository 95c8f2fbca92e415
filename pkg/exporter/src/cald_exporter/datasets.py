"""Dataset resolution: image folders with per-split subtrees.

A dataset name is a directory laid out as ``<root>/<split>/<class>/*``,
the usual image-folder convention. Classes are the sorted subdirectory
names and samples are sorted by path, so iteration order (and therefore
the exported file) is deterministic. Names that are not such a directory
are errors; nothing is ever downloaded.
"""

from __future__ import annotations

import os

from torchvision.datasets import ImageFolder

from .errors import DatasetResolutionError

SPLITS = ("train", "val", "test")


def resolve_split(name: str, split: str, transform) -> ImageFolder:
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    if not os.path.isdir(name):
        raise DatasetResolutionError(
            f"unknown dataset {name!r}: expected a directory with "
            "<split>/<class>/ image subtrees")
    split_dir = os.path.join(name, split)
    if not os.path.isdir(split_dir):
        present = sorted(e for e in os.listdir(name)
                         if os.path.isdir(os.path.join(name, e)))
        raise DatasetResolutionError(
            f"dataset {name!r} has no {split!r} split (present: {present})")
    try:
        return ImageFolder(split_dir, transform=transform)
    except FileNotFoundError as exc:
        raise DatasetResolutionError(
            f"no class folders with images under {split_dir}: {exc}") from exc
