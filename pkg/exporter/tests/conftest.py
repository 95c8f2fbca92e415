import struct
from types import SimpleNamespace

import numpy as np
import pytest
import torch
from PIL import Image

from cald_exporter import jobs
from cald_exporter import models

HEADER = struct.Struct("<4sHHQII")

# test/ carries 5 images per class (n = 10), val/ two per class (n = 4)
TEST_PER_CLASS = 5
VAL_PER_CLASS = 2
CLASSES = ("class_a", "class_b")
IMAGE_SIZE = 32


def write_images(root, split, per_class, rng):
    for cls in CLASSES:
        cls_dir = root / split / cls
        cls_dir.mkdir(parents=True)
        for i in range(per_class):
            pixels = rng.integers(0, 256, size=(IMAGE_SIZE, IMAGE_SIZE, 3),
                                  dtype=np.uint8)
            Image.fromarray(pixels, "RGB").save(cls_dir / f"img_{i:02d}.png")


@pytest.fixture(scope="session")
def image_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("images")
    rng = np.random.default_rng(20260817)
    write_images(root, "test", TEST_PER_CLASS, rng)
    write_images(root, "val", VAL_PER_CLASS, rng)
    return root


@pytest.fixture(scope="session")
def checkpoint(tmp_path_factory):
    """A fixed (seeded, untrained) classifier saved in checkpoint form."""
    path = tmp_path_factory.mktemp("model") / "tiny.pt"
    torch.manual_seed(0)
    net = models.TinyConvNet(num_classes=len(CLASSES))
    torch.save({"arch": "tinyconv", "state_dict": net.state_dict(),
                "num_classes": len(CLASSES), "image_size": IMAGE_SIZE}, path)
    return path


@pytest.fixture(scope="session")
def exported(tmp_path_factory, image_root, checkpoint):
    out = tmp_path_factory.mktemp("exports") / "test.cald"
    job = jobs.ExportJob(model=str(checkpoint), dataset=str(image_root),
                               split="test", out=str(out))
    summary = jobs.export(job)
    return SimpleNamespace(path=out, job=job, summary=summary)


def read_cald(path):
    """Independent reader: header via struct, arrays via frombuffer."""
    raw = path.read_bytes() if hasattr(path, "read_bytes") else open(path, "rb").read()
    magic, version, reserved, n, d, k = HEADER.unpack_from(raw, 0)
    offset = HEADER.size
    features = np.frombuffer(raw, "<f4", count=n * d, offset=offset).reshape(n, d)
    offset += n * d * 4
    logits = np.frombuffer(raw, "<f4", count=n * k, offset=offset).reshape(n, k)
    offset += n * k * 4
    labels = np.frombuffer(raw, "<u4", count=n, offset=offset)
    assert offset + n * 4 == len(raw)
    return SimpleNamespace(magic=magic, version=version, reserved=reserved,
                           n=n, d=d, k=k, features=features, logits=logits,
                           labels=labels)
