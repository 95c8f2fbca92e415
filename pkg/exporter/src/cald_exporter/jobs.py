"""The export pipeline: frozen classifier in, CALD file out.

One job = one model, one dataset split, one output file. Inference runs
in eval mode with no gradient tracking, batches are iterated in dataset
order with no shuffling and no augmentation, and arrays are float32 end
to end, so a job's output is byte-identical across runs with the same
weights and files.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import torch
from torch.utils.data import DataLoader

from . import caldfile, datasets, models
from .datasets import SPLITS


@dataclasses.dataclass(frozen=True)
class ExportJob:
    """What to run and where to write it.

    ``model`` is a registered name or checkpoint path, ``dataset`` an
    image-folder root, ``device`` an inference hint (cpu unless you have
    a reason).
    """

    model: str
    dataset: str
    split: str
    out: str
    batch_size: int = 64
    device: str = "cpu"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be at least 1, got {self.batch_size}")
        try:
            torch.device(self.device)
        except RuntimeError as exc:
            raise ValueError(f"bad device hint {self.device!r}: {exc}") from exc


@dataclasses.dataclass(frozen=True)
class ExportSummary:
    n: int
    d: int
    k: int
    accuracy: float


def export(job: ExportJob) -> ExportSummary:
    """Run the job and return what was written.

    Features are the input of the model's final linear layer (pooled
    penultimate activations), logits its output, labels the ground truth
    from the folder structure. The reported accuracy is computed from the
    float32 arrays as written, not from the higher-precision tensors, so
    any consumer of the file lands on the same number.
    """
    resolved = models.resolve_model(job.model)
    device = torch.device(job.device)
    module = resolved.module.to(device)
    module.eval()
    folder = datasets.resolve_split(job.dataset, job.split, resolved.transform)
    if len(folder.classes) > resolved.num_classes:
        raise ValueError(
            f"dataset has {len(folder.classes)} classes but model "
            f"{job.model!r} outputs {resolved.num_classes}")
    loader = DataLoader(folder, batch_size=job.batch_size, shuffle=False,
                        num_workers=0)

    feature_batches, logit_batches, label_batches = [], [], []
    with models.FeatureTap(module) as tap, torch.no_grad():
        for images, targets in loader:
            out = module(images.to(device))
            feats = tap.take()
            feature_batches.append(feats.cpu().numpy())
            logit_batches.append(out.detach().cpu().numpy())
            label_batches.append(targets.numpy())

    features = np.ascontiguousarray(np.concatenate(feature_batches), dtype="<f4")
    logits = np.ascontiguousarray(np.concatenate(logit_batches), dtype="<f4")
    labels = np.concatenate(label_batches)
    caldfile.write_cald(job.out, features, logits, labels)

    accuracy = float((np.argmax(logits, axis=1) == labels).mean())
    return ExportSummary(n=features.shape[0], d=features.shape[1],
                         k=logits.shape[1], accuracy=accuracy)
