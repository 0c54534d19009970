"""Inference protocols: image-to-image reID, attribute search (APS) and attribute recognition (PAR).

All scores are cosine similarities on L2-normalised vectors. Prototypes are
stored unnormalised and normalised on the fly. reID scoring never touches
prototypes; it only sees representation arrays.
"""

from __future__ import annotations

import csv
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .schema import GROUPS, GROUP_ALIASES, AttributeSchema, SchemaError, SemanticId

EPS = 1e-12
INDEX_MAGIC = b"SIDGIDX1"


def l2_normalize(x: np.ndarray, axis=-1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=axis, keepdims=True), EPS)


def _check_dims(a: np.ndarray, b: np.ndarray):
    if a.shape[-1] != b.shape[-1] or a.shape[-2] != b.shape[-2]:
        raise ValueError(f"representation shapes {a.shape} and {b.shape} do not match")


def _cosines(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # shared by reID and APS scoring so that both agree bit for bit
    return np.sum(l2_normalize(a) * l2_normalize(b), axis=-1)


def reid_score(query: np.ndarray, gallery_item: np.ndarray) -> float:
    """Mean over the five groups of the cosine similarity; inputs are (5, d)."""
    query, gallery_item = np.asarray(query), np.asarray(gallery_item)
    _check_dims(query, gallery_item)
    sims = _cosines(query, gallery_item)
    return float(sims.sum() / len(sims))


def reid_scores(queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """(Q, 5, d) x (N, 5, d) -> (Q, N) averaged per-group cosine similarities."""
    _check_dims(queries, gallery)
    q, g = l2_normalize(queries), l2_normalize(gallery)
    return np.einsum("qgd,ngd->qn", q, g) / q.shape[1]


@dataclass(frozen=True)
class AttributeQuery:
    """Candidate SID indices per present group.

    A fully specified group has one candidate; a group with some attributes
    left open has every consistent SID as a candidate and is scored by the
    best-matching one.
    """
    candidates: Mapping[str, tuple[int, ...]]

    def __post_init__(self):
        if not self.candidates or not any(self.candidates.values()):
            raise ValueError("attribute query must name at least one group")

    @classmethod
    def from_sids(cls, sids: Mapping[str, int | SemanticId]) -> "AttributeQuery":
        return cls({g: (s.index if isinstance(s, SemanticId) else int(s),) for g, s in sids.items()})

    @property
    def present_groups(self) -> tuple[str, ...]:
        return tuple(g for g in GROUPS if g in self.candidates)

    def restrict(self, groups: Sequence[str]) -> "AttributeQuery":
        groups = [GROUP_ALIASES.get(g, g) for g in groups]
        return AttributeQuery({g: c for g, c in self.candidates.items() if g in groups})


_TERM = re.compile(r"^(?:group=)?(\w+):(.+)$")


def parse_query(text: str, schema: AttributeSchema) -> AttributeQuery:
    """Parse e.g. ``identity:gender=female,age=adult carrying:backpack=present``.

    Groups are separated by whitespace or ``;``. A group prefix ``group=`` is tolerated.
    """
    candidates = {}
    for term in re.split(r"[\s;]+", text.strip()):
        if not term:
            continue
        m = _TERM.match(term)
        if not m:
            raise SchemaError(f"cannot parse query term {term!r}; expected group:attr=label,...")
        group = schema[m.group(1)]
        labels = {}
        for pair in m.group(2).split(","):
            if "=" not in pair:
                raise SchemaError(f"expected attr=label in {term!r}")
            k, v = pair.split("=", 1)
            labels[k.strip()] = v.strip()
        candidates[group.name] = tuple(group.matching_sids(labels))
    return AttributeQuery(candidates)


def aps_scores(query: AttributeQuery, prototypes: Mapping[str, np.ndarray], gallery: np.ndarray) -> np.ndarray:
    """Score every gallery item (N, 5, d) against prototypes of the queried SIDs; mean over present groups."""
    gallery = np.asarray(gallery)
    groups = query.present_groups
    if not groups:
        raise ValueError("empty attribute query")
    best = np.empty((gallery.shape[0], len(groups)))
    for j, g in enumerate(groups):
        protos = np.asarray(prototypes[g])
        idx = np.asarray(query.candidates[g])
        if idx.min() < 0 or idx.max() >= len(protos):
            raise SchemaError(f"query SID out of range for group {g!r}")
        sims = _cosines(gallery[:, None, GROUPS.index(g)], protos[idx][None])
        best[:, j] = sims.max(axis=1)
    return best.sum(axis=1) / len(groups)


def aps_score(query: AttributeQuery, prototypes: Mapping[str, np.ndarray], gallery_item: np.ndarray) -> float:
    return float(aps_scores(query, prototypes, np.asarray(gallery_item)[None])[0])


def par_predict(reps: np.ndarray, prototypes: Mapping[str, np.ndarray]) -> np.ndarray:
    """Nearest prototype by cosine per group; (B, 5, d) or (5, d) -> SID indices (B, 5) or (5,).

    Ties go to the smallest index.
    """
    reps = np.asarray(reps)
    single = reps.ndim == 2
    reps = l2_normalize(reps[None] if single else reps)
    out = np.empty(reps.shape[:2], dtype=np.int64)
    for j, g in enumerate(GROUPS):
        sims = reps[:, j] @ l2_normalize(prototypes[g]).T
        out[:, j] = np.argmax(sims, axis=1)
    return out[0] if single else out


def par_labels(sid_indices: np.ndarray, schema: AttributeSchema) -> list[dict[str, str]]:
    """Expand predicted per-group SIDs into attribute labels."""
    sid_indices = np.atleast_2d(sid_indices)
    return [schema.labels_of(dict(zip(GROUPS, row))) for row in sid_indices]


@dataclass
class RankedResult:
    indices: np.ndarray
    scores: np.ndarray
    query: dict | None = None

    def __len__(self):
        return len(self.indices)


def rank(scores: np.ndarray, query_pid=None, query_cam=None, gallery_pids=None, gallery_cams=None,
         protocol_filter: bool = False, query: dict | None = None) -> RankedResult:
    """Stable descending sort; optionally drop gallery items sharing the query's person and camera."""
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    keep = np.arange(len(scores))
    if protocol_filter:
        if gallery_pids is None or gallery_cams is None:
            raise ValueError("protocol filter needs gallery person and camera ids")
        junk = (np.asarray(gallery_pids) == query_pid) & (np.asarray(gallery_cams) == query_cam)
        keep = keep[~junk]
    order = keep[np.argsort(-scores[keep], kind="stable")]
    return RankedResult(order, scores[order], query)


@dataclass
class GalleryIndex:
    feats: np.ndarray  # (N, 5, d), unit rows
    person_ids: np.ndarray
    camera_ids: np.ndarray
    sids: np.ndarray | None = None  # (N, 5)
    image_refs: list | None = None

    def __post_init__(self):
        feats = np.asarray(self.feats)
        # rows that are already unit length (e.g. read back from disk) are kept bit-exact
        if not (feats.dtype == np.float32 and np.allclose(np.linalg.norm(feats, axis=-1), 1.0, atol=1e-5)):
            feats = l2_normalize(feats).astype(np.float32)
        self.feats = feats
        n = len(self.feats)
        if len(self.person_ids) != n or len(self.camera_ids) != n:
            raise ValueError("metadata length does not match the number of embeddings")

    def __len__(self):
        return len(self.feats)

    @property
    def dim(self) -> int:
        return self.feats.shape[-1]

    def save(self, path, schema_hash: str) -> tuple[Path, Path]:
        """Binary embedding file plus a CSV sidecar (``<path>.csv``)."""
        path = Path(path)
        n, g, d = self.feats.shape
        with open(path, "wb") as fh:
            fh.write(INDEX_MAGIC)
            fh.write(schema_hash.encode().ljust(32, b"\0")[:32])
            fh.write(struct.pack("<III", d, n, g))
            fh.write(self.feats.astype("<f4").tobytes())
        side = path.with_suffix(path.suffix + ".csv")
        with open(side, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "person_id", "camera_id", "image_ref", *(f"sid_{x}" for x in GROUPS)])
            for i in range(n):
                sids = list(self.sids[i]) if self.sids is not None else [""] * 5
                ref = self.image_refs[i] if self.image_refs is not None else ""
                w.writerow([i, int(self.person_ids[i]), int(self.camera_ids[i]), ref, *sids])
        return path, side

    @classmethod
    def load(cls, path, schema_hash: str | None = None) -> "GalleryIndex":
        path = Path(path)
        with open(path, "rb") as fh:
            if fh.read(8) != INDEX_MAGIC:
                raise ValueError(f"{path} is not a gallery index file")
            stored = fh.read(32).rstrip(b"\0").decode()
            d, n, g = struct.unpack("<III", fh.read(12))
            feats = np.frombuffer(fh.read(4 * n * g * d), dtype="<f4").reshape(n, g, d)
        if schema_hash is not None and stored != schema_hash:
            raise ValueError(f"gallery index was built for schema {stored}, not {schema_hash}")
        with open(path.with_suffix(path.suffix + ".csv"), newline="") as fh:
            rows = list(csv.DictReader(fh))
        pids = np.array([int(r["person_id"]) for r in rows])
        cams = np.array([int(r["camera_id"]) for r in rows])
        sids = None
        if rows and rows[0]["sid_head"] != "":
            sids = np.array([[int(r[f"sid_{x}"]) for x in GROUPS] for r in rows])
        return cls(feats.copy(), pids, cams, sids, [r["image_ref"] for r in rows])
