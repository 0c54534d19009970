"""Person records, dataset splits, PK batch sampling and train-time augmentation."""

from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .schema import GROUPS, AttributeSchema, SchemaError, SemanticId

log = logging.getLogger(__name__)

# Known annotated training-identity counts for the public benchmarks.
EXPECTED_TRAIN_IDENTITIES = {"market": 751, "duke": 702}

SPLIT_DIRS = {
    "train": ("train", "bounding_box_train"),
    "query": ("query",),
    "gallery": ("gallery", "bounding_box_test"),
}
IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp"}
_NAME_RE = re.compile(r"^(-?\d+)_c?(\d+)")

# ImageNet channel means, used as the random-erasing fill value
ERASE_FILL = (0.4914, 0.4822, 0.4465)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class PersonRecord:
    image_ref: str | int
    person_id: int
    camera_id: int
    sids: Mapping[str, SemanticId]

    def sid_index(self, group: str) -> int:
        return self.sids[group].index


@dataclass
class DatasetSplit:
    records: list[PersonRecord]
    role: str
    schema: AttributeSchema
    # (n, H, W, 3) uint8, present for in-memory (synthetic) data
    images: np.ndarray | None = None
    image_size: tuple[int, int] | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for r in self.records:
            if set(r.sids) != set(GROUPS):
                raise DatasetError(f"record {r.image_ref!r} does not carry a SID for every group")

    def __len__(self):
        return len(self.records)

    @property
    def person_ids(self) -> np.ndarray:
        return np.array([r.person_id for r in self.records], dtype=np.int64)

    @property
    def camera_ids(self) -> np.ndarray:
        return np.array([r.camera_id for r in self.records], dtype=np.int64)

    @property
    def num_persons(self) -> int:
        return len({r.person_id for r in self.records})

    def sid_matrix(self) -> np.ndarray:
        """(n, 5) integer SID indices, columns in canonical group order."""
        return np.array([[r.sids[g].index for g in GROUPS] for r in self.records], dtype=np.int64).reshape(-1, 5)

    def person_sids(self) -> dict[int, dict[str, int]]:
        out = {}
        for r in self.records:
            out.setdefault(r.person_id, {g: r.sids[g].index for g in GROUPS})
        return out

    def sid_counts(self) -> dict[str, np.ndarray]:
        """Number of distinct persons carrying each SID, per group (``N^G_g``)."""
        counts = {g.name: np.zeros(g.num_sids, dtype=np.int64) for g in self.schema}
        for sids in self.person_sids().values():
            for g, k in sids.items():
                counts[g][k] += 1
        return counts

    def indices_by_person(self) -> dict[int, np.ndarray]:
        if "by_person" not in self._cache:
            by: dict[int, list[int]] = {}
            for i, r in enumerate(self.records):
                by.setdefault(r.person_id, []).append(i)
            self._cache["by_person"] = {p: np.array(v) for p, v in sorted(by.items())}
        return self._cache["by_person"]

    def load_images(self, indices: Sequence[int]) -> np.ndarray:
        """Float32 images in [0, 1], shape (len(indices), H, W, 3)."""
        if self.images is not None:
            return self.images[np.asarray(indices)].astype(np.float32) / 255.0
        return np.stack([read_image(self.records[i].image_ref, self.image_size) for i in indices])

    def subset(self, keep: Sequence[int], role: str | None = None) -> "DatasetSplit":
        keep = list(keep)
        return DatasetSplit(
            [self.records[i] for i in keep],
            role or self.role,
            self.schema,
            None if self.images is None else self.images[keep],
            self.image_size,
        )


def read_image(path, size: tuple[int, int] | None) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None:
            im = im.resize((size[1], size[0]), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


def parse_image_name(name: str) -> tuple[int, int]:
    """``personID_cameraID_*`` -> (person_id, camera_id); Market's ``c3s1`` camera form is accepted."""
    m = _NAME_RE.match(name)
    if not m:
        raise DatasetError(f"image name {name!r} does not follow personID_cameraID_*")
    return int(m.group(1)), int(m.group(2))


def read_annotations(path, schema: AttributeSchema) -> dict[int, dict[str, SemanticId]]:
    """Delimited table with a ``person_id`` column and one column per attribute."""
    text = Path(path).read_text()
    dialect = csv.Sniffer().sniff(text.splitlines()[0], delimiters=",\t;")
    rows = list(csv.DictReader(text.splitlines(), dialect=dialect))
    out = {}
    for row in rows:
        row = {k.strip(): (v or "").strip() for k, v in row.items() if k is not None}
        try:
            pid = int(row.pop("person_id"))
        except KeyError:
            raise DatasetError("annotation table needs a person_id column") from None
        try:
            out[pid] = schema.sids_of(row)
        except (SchemaError, KeyError) as e:
            raise DatasetError(f"bad annotation for person {pid}: {e}") from e
    return out


def load_dataset(root, schema: AttributeSchema, annotations, image_size=None,
                 expected_train_ids: int | None = None) -> dict[str, DatasetSplit]:
    """Load train/query/gallery splits from a reID-style directory.

    Sub-directories may be named ``train``/``query``/``gallery`` or use the
    Market layout (``bounding_box_train``/``query``/``bounding_box_test``).
    Images with a negative person id (junk detections) are skipped.
    """
    root = Path(root)
    ann = annotations if isinstance(annotations, Mapping) else read_annotations(annotations, schema)
    splits = {}
    for role, candidates in SPLIT_DIRS.items():
        folder = next((root / c for c in candidates if (root / c).is_dir()), None)
        if folder is None:
            continue
        records = []
        for p in sorted(folder.iterdir()):
            if p.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            pid, cam = parse_image_name(p.name)
            if pid < 0:
                continue
            if pid not in ann:
                raise DatasetError(f"person {pid} ({p.name}) has no attribute annotation")
            records.append(PersonRecord(str(p), pid, cam, ann[pid]))
        splits[role] = DatasetSplit(records, role, schema, image_size=image_size)
    if "train" not in splits:
        raise DatasetError(f"no training images found under {root}")
    if expected_train_ids is not None:
        validate_identity_count(splits["train"], expected_train_ids)
    return splits


def validate_identity_count(split: DatasetSplit, expected: int | str):
    if isinstance(expected, str):
        expected = EXPECTED_TRAIN_IDENTITIES[expected]
    if split.num_persons != expected:
        raise DatasetError(f"{split.role} split has {split.num_persons} identities, expected {expected}")


@dataclass(frozen=True)
class SamplerConfig:
    persons_per_batch: int = 16
    images_per_person: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.persons_per_batch < 2 or self.images_per_person < 2:
            raise ValueError("PK sampling needs P >= 2 and K >= 2")

    @property
    def batch_size(self) -> int:
        return self.persons_per_batch * self.images_per_person


@dataclass(frozen=True)
class AugmentConfig:
    flip: bool = True
    erase_prob: float = 0.5
    erase_area: tuple[float, float] = (0.02, 0.4)
    erase_min_aspect: float = 0.3


@dataclass
class Batch:
    indices: np.ndarray
    person_ids: np.ndarray
    flips: np.ndarray
    # one (top, left, height, width) row per sample; height 0 means no erasing
    erase_boxes: np.ndarray


def sample_batch(split: DatasetSplit, cfg: SamplerConfig, rng: np.random.Generator,
                 augment: AugmentConfig | None = None) -> Batch:
    """Draw P distinct persons and K images of each.

    Persons with fewer than K images are sampled with replacement.
    """
    by_person = split.indices_by_person()
    pids = np.array(list(by_person))
    P, K = cfg.persons_per_batch, cfg.images_per_person
    if len(pids) < P:
        raise DatasetError(f"split has {len(pids)} persons, batch needs {P}")
    chosen = rng.choice(pids, size=P, replace=False)
    idx = []
    for p in chosen:
        pool = by_person[int(p)]
        idx.append(rng.choice(pool, size=K, replace=len(pool) < K))
    idx = np.concatenate(idx)
    n = len(idx)
    flips = np.zeros(n, dtype=bool)
    boxes = np.zeros((n, 4), dtype=np.int64)
    if augment is not None:
        if augment.flip:
            flips = rng.random(n) < 0.5
        if augment.erase_prob > 0 and split.image_size is not None:
            for i in range(n):
                boxes[i] = _erase_box(rng, split.image_size, augment)
    return Batch(idx, split.person_ids[idx], flips, boxes)


def _erase_box(rng, size, aug: AugmentConfig):
    if rng.random() >= aug.erase_prob:
        return (0, 0, 0, 0)
    H, W = size
    for _ in range(100):
        area = rng.uniform(*aug.erase_area) * H * W
        aspect = rng.uniform(aug.erase_min_aspect, 1.0 / aug.erase_min_aspect)
        h = int(round(math.sqrt(area * aspect)))
        w = int(round(math.sqrt(area / aspect)))
        if 0 < h < H and 0 < w < W:
            return (int(rng.integers(0, H - h)), int(rng.integers(0, W - w)), h, w)
    return (0, 0, 0, 0)


def apply_augmentation(images: np.ndarray, batch: Batch) -> np.ndarray:
    out = images.copy()
    out[batch.flips] = out[batch.flips, :, ::-1]
    for i, (t, l, h, w) in enumerate(batch.erase_boxes):
        if h > 0:
            out[i, t:t + h, l:l + w] = ERASE_FILL
    return out
