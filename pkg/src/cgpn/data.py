"""Dataset ingestion, identity-balanced sampling, augmentation, and a
synthetic toy dataset for desk-scale verification.

On-disk layout: a root directory with ``train``, ``query`` and ``gallery``
subdirectories whose files follow the surveillance-benchmark naming grammar
``PID_cCsS_frame.jpg`` (e.g. ``0002_c1s1_000451_03.jpg`` is person 2 seen by
camera 1). Person id -1 marks junk images.
"""

import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

__all__ = [
    "ImageRecord",
    "DatasetIndex",
    "scan_dataset",
    "pk_sample",
    "augment",
    "load_image",
    "make_synthetic",
    "export_dataset",
    "IMAGE_HEIGHT",
    "IMAGE_WIDTH",
]

SPLITS = ("train", "query", "gallery")

# Input geometry and the pretraining-corpus channel statistics the backbone
# expects.
IMAGE_HEIGHT = 384
IMAGE_WIDTH = 128
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

_NAME_RE = re.compile(r"^(-?\d+)_c(\d+)")


@dataclass(frozen=True)
class ImageRecord:
    path: str
    person_id: int
    camera_id: int
    split: str


@dataclass
class DatasetIndex:
    """All records of a dataset plus an identity lookup for the train split.

    ``images`` optionally holds in-memory pixel arrays keyed by record path
    (used by the synthetic dataset); records without an entry are read from
    disk. Immutable by convention once built.
    """

    records: list
    images: dict = field(default_factory=dict)

    def split(self, name):
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [r for r in self.records if r.split == name]

    @property
    def id_to_records(self):
        """Train identity -> record indices; junk ids (-1) excluded."""
        mapping = {}
        for i, r in enumerate(self.records):
            if r.split == "train" and r.person_id != -1:
                mapping.setdefault(r.person_id, []).append(i)
        return mapping

    def train_label_map(self):
        """Train identity -> contiguous class index, sorted by identity."""
        return {pid: i for i, pid in enumerate(sorted(self.id_to_records))}


def parse_name(name: str):
    """(person_id, camera_id) from the filename grammar, or None if malformed."""
    m = _NAME_RE.match(name)
    if m is None:
        return None
    return int(m.group(1)), int(m.group(2))


def scan_dataset(root) -> DatasetIndex:
    """Index a train/query/gallery directory tree.

    Files that do not parse under the naming grammar are warned about and
    skipped; an empty split is an error. Listing order does not matter:
    records are sorted by (split, filename).
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    records = []
    for split in SPLITS:
        sub = root / split
        if not sub.is_dir():
            raise FileNotFoundError(f"missing split directory {sub}")
        found = 0
        for f in sorted(sub.iterdir()):
            if f.suffix.lower() not in (".jpg", ".jpeg", ".png"):
                continue
            parsed = parse_name(f.name)
            if parsed is None:
                warnings.warn(f"skipping unparsable filename {f}")
                continue
            pid, cam = parsed
            records.append(ImageRecord(str(f), pid, cam, split))
            found += 1
        if found == 0:
            raise ValueError(f"split {split!r} under {root} contains no usable images")
    records.sort(key=lambda r: (SPLITS.index(r.split), Path(r.path).name))
    return DatasetIndex(records=records)


def pk_sample(index: DatasetIndex, spec, rng) -> list:
    """One identity-balanced batch: P distinct train identities, K records each.

    Identities with fewer than K images are sampled with replacement.
    Returns record indices into ``index.records``. `rng` is a numpy
    Generator or a seed.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    by_id = index.id_to_records
    ids = sorted(by_id)
    if len(ids) < spec.num_ids:
        raise ValueError(
            f"need {spec.num_ids} identities, dataset has {len(ids)}"
        )
    chosen = rng.choice(len(ids), size=spec.num_ids, replace=False)
    batch = []
    for i in chosen:
        pool = by_id[ids[i]]
        replace = len(pool) < spec.num_imgs
        picks = rng.choice(len(pool), size=spec.num_imgs, replace=replace)
        batch.extend(pool[j] for j in picks)
    return batch


def load_image(index: DatasetIndex, record: ImageRecord):
    """Pixel data for a record: the in-memory array if present, else the file."""
    if record.path in index.images:
        return index.images[record.path]
    try:
        with Image.open(record.path) as im:
            return im.convert("RGB")
    except Exception as e:
        raise ValueError(f"cannot decode image {record.path}: {e}") from e


def augment(image, train_mode: bool, rng=None) -> torch.Tensor:
    """Resize to the network input size, optionally flip, normalize.

    `image` is a PIL image, an HxWx3 uint8 array, or a path. Train mode
    mirrors horizontally with probability 0.5 using `rng`; eval mode is
    deterministic.
    """
    if isinstance(image, (str, Path)):
        try:
            with Image.open(image) as im:
                image = im.convert("RGB")
        except Exception as e:
            raise ValueError(f"cannot decode image {image}: {e}") from e
    if isinstance(image, np.ndarray):
        image = Image.fromarray(image)
    image = image.convert("RGB").resize((IMAGE_WIDTH, IMAGE_HEIGHT), Image.BILINEAR)

    if train_mode:
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        if rng.random() < 0.5:
            image = image.transpose(Image.FLIP_LEFT_RIGHT)

    arr = np.asarray(image, dtype=np.float32) / 255.0
    arr = (arr - np.asarray(IMAGENET_MEAN, dtype=np.float32)) / np.asarray(
        IMAGENET_STD, dtype=np.float32
    )
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def _identity_pattern(rng, height, width):
    """Base appearance for one identity: stacked random color bands."""
    bands = rng.integers(3, 6)
    edges = np.linspace(0, height, bands + 1, dtype=int)
    img = np.zeros((height, width, 3), dtype=np.float32)
    for b in range(bands):
        img[edges[b]:edges[b + 1]] = rng.integers(30, 226, size=3)
    # a vertical texture stripe so identities differ in more than color
    x = rng.integers(0, width - 4)
    img[:, x:x + 4] = rng.integers(0, 256, size=3)
    return img


def make_synthetic(num_ids: int, imgs_per_id: int, seed: int = 0,
                   height: int = 96, width: int = 32) -> DatasetIndex:
    """Deterministic toy dataset with two pseudo-cameras.

    Each identity gets a distinct base pattern; images add small per-image
    noise and a per-camera tint. The last two images of each identity form
    its query (camera 1) and gallery (camera 2) entries, the rest are train
    images alternating cameras so the train split alone supports the
    cross-camera protocol.
    """
    if num_ids < 2:
        raise ValueError(f"need at least 2 identities, got {num_ids}")
    if imgs_per_id < 3:
        raise ValueError(f"need at least 3 images per identity, got {imgs_per_id}")
    rng = np.random.default_rng(seed)
    cam_tint = {1: np.array([6.0, 0.0, -6.0]), 2: np.array([-6.0, 3.0, 3.0])}
    records, images = [], {}
    for pid in range(1, num_ids + 1):
        base = _identity_pattern(rng, height, width)
        for j in range(imgs_per_id):
            if j == imgs_per_id - 2:
                split, cam = "query", 1
            elif j == imgs_per_id - 1:
                split, cam = "gallery", 2
            else:
                split, cam = "train", 1 + (j % 2)
            noise = rng.normal(0.0, 4.0, size=base.shape)
            pixels = np.clip(base + noise + cam_tint[cam], 0, 255).astype(np.uint8)
            name = f"{pid:04d}_c{cam}s1_{j:06d}_00.jpg"
            records.append(ImageRecord(name, pid, cam, split))
            images[name] = pixels
    return DatasetIndex(records=records, images=images)


def export_dataset(index: DatasetIndex, root) -> Path:
    """Write an in-memory dataset to disk in the train/query/gallery layout."""
    root = Path(root)
    for split in SPLITS:
        (root / split).mkdir(parents=True, exist_ok=True)
    for record in index.records:
        pixels = index.images.get(record.path)
        if pixels is None:
            raise ValueError(f"record {record.path} has no in-memory image to export")
        Image.fromarray(pixels).save(root / record.split / Path(record.path).name)
    return root
