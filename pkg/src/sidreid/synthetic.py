"""Procedurally rendered person images with known attributes.

Every group's SID controls a visible region of the figure:

* head: band colour from the first head attribute, side strips for the rest
* upper/lower body: block colour from the first attribute, side strips whose
  length encodes each further attribute (sleeve length, bottom length, ...)
* carrying: one blob per attribute at a fixed height beside the body
* identity: face tone and overall brightness from the first attribute,
  figure width (aspect) from the second

On top of that each person gets a fixed texture (a small multi-colour logo
on the torso plus a stripe modulation on the legs), so persons sharing
every SID still look different. Per-image variation comes from the camera
background, horizontal shift, brightness jitter and pixel noise, and
optionally from a random vertical shrink/offset of the whole figure to
mimic loose detector boxes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DatasetSplit, PersonRecord
from .schema import GROUPS, AttributeSchema, SchemaError

NAMED_COLORS = {
    "black": (0.08, 0.08, 0.08), "white": (0.95, 0.95, 0.95), "red": (0.85, 0.1, 0.1),
    "green": (0.1, 0.7, 0.15), "blue": (0.1, 0.2, 0.85), "yellow": (0.95, 0.85, 0.1),
    "purple": (0.55, 0.1, 0.7), "pink": (0.98, 0.55, 0.7), "gray": (0.5, 0.5, 0.5),
    "brown": (0.5, 0.3, 0.1), "orange": (1.0, 0.55, 0.0), "cyan": (0.1, 0.85, 0.85),
}
FALLBACK_PALETTE = [
    (0.85, 0.1, 0.1), (0.1, 0.2, 0.85), (0.95, 0.85, 0.1), (0.1, 0.7, 0.15), (0.55, 0.1, 0.7),
    (0.1, 0.85, 0.85), (1.0, 0.55, 0.0), (0.95, 0.95, 0.95), (0.08, 0.08, 0.08), (0.98, 0.55, 0.7),
    (0.5, 0.3, 0.1), (0.5, 0.5, 0.5),
]
STRIP_COLORS = [(0.15, 0.1, 0.05), (0.95, 0.8, 0.65), (1.0, 0.5, 0.0), (0.3, 0.3, 0.9), (0.9, 0.9, 0.55)]
BLOB_COLORS = [(0.1, 0.9, 0.9), (0.95, 0.45, 0.75), (0.6, 0.95, 0.3), (0.6, 0.6, 0.1)]
SKIN_TONES = [(1.0, 0.9, 0.75), (0.75, 0.55, 0.4), (0.4, 0.28, 0.2), (0.9, 0.75, 0.75)]
# per-camera illumination cast, multiplies the whole frame
CAMERA_CASTS = [(1.12, 1.0, 0.88), (0.88, 1.0, 1.12), (1.0, 1.1, 0.9), (0.95, 0.92, 1.08),
                (1.08, 0.95, 1.0), (0.92, 1.05, 1.0)]
CAMERA_COLORS = [(0.35, 0.38, 0.35), (0.3, 0.32, 0.4), (0.42, 0.38, 0.33), (0.33, 0.33, 0.33),
                 (0.38, 0.42, 0.4), (0.28, 0.3, 0.3)]

# vertical extent of each region as a fraction of the figure height
REGIONS = {"head": (0.0, 0.2), "upper_body": (0.2, 0.55), "lower_body": (0.55, 1.0)}


@dataclass(frozen=True)
class SyntheticSpec:
    num_train_persons: int = 20
    num_test_persons: int = 20
    train_images_per_person: int = 8
    query_per_person: int = 1
    gallery_per_person: int = 4
    num_cameras: int = 4
    image_size: tuple[int, int] = (96, 32)
    noise: float = 0.03
    # random background rectangles per image
    clutter: int = 0
    camera_cast: bool = False
    # 0 keeps the figure filling the frame; v > 0 shrinks it to a random
    # height fraction in [1 - v, 1] at a random vertical position
    vertical_jitter: float = 0.0
    # SIDs excluded from training, as "group:index"
    holdout: tuple[str, ...] = ()
    holdout_test_persons: int = 3
    # persons rendered with one identical SID combination (differing only in
    # identity texture); > 1 makes reID depend on identity-level detail
    persons_per_combo: int = 1
    train_persons_per_combo: int = 1


@dataclass(frozen=True)
class PersonLook:
    """Per-person constants of the renderer."""
    person_id: int
    sids: dict
    width_jitter: float
    logo: np.ndarray  # (3, 3, 3) colours
    logo_pos: tuple[float, float]
    stripe_freq: float
    stripe_phase: float
    stripe_amp: float


def _label_color(label: str, index: int, offset: int) -> np.ndarray:
    if label in NAMED_COLORS:
        return np.array(NAMED_COLORS[label])
    return np.array(FALLBACK_PALETTE[(index + offset) % len(FALLBACK_PALETTE)])


def parse_holdout(items: Sequence[str], schema: AttributeSchema) -> dict[str, set[int]]:
    out: dict[str, set[int]] = {g: set() for g in GROUPS}
    for item in items:
        try:
            gname, idx = str(item).split(":")
            group = schema[gname]
            idx = int(idx)
        except (ValueError, SchemaError) as e:
            raise SchemaError(f"bad holdout entry {item!r}; expected group:index") from e
        if not 0 <= idx < group.num_sids:
            raise SchemaError(f"holdout SID {item!r} exceeds the {group.num_sids} SIDs of {group.name!r}")
        out[group.name].add(idx)
    return out


def _balanced_labels(n: int, k: int, rng) -> np.ndarray:
    labels = np.resize(np.arange(k), n)
    rng.shuffle(labels)
    return labels


def _assign_sids(n, schema, rng, forbidden: dict[str, set[int]]):
    """Per-person SID indices with every label of every attribute used about equally often."""
    out = [dict() for _ in range(n)]
    for g in schema:
        digits = np.stack([_balanced_labels(n, len(a.labels), rng) for a in g.attributes], axis=1)
        for p in range(n):
            k = g.index_of_digits(digits[p])
            while k in forbidden[g.name]:
                k = int(rng.integers(g.num_sids))
            out[p][g.name] = k
    return out


def _replicated_sids(n, per_combo, schema, rng, forbidden):
    combos = _assign_sids(-(-n // per_combo), schema, rng, forbidden)
    return [dict(combos[p // per_combo]) for p in range(n)]


def _make_look(pid, sids, rng) -> PersonLook:
    return PersonLook(
        person_id=pid,
        sids=dict(sids),
        width_jitter=float(rng.uniform(-0.04, 0.04)),
        logo=rng.uniform(0.0, 1.0, size=(3, 3, 3)),
        logo_pos=(float(rng.uniform(0.3, 0.7)), float(rng.uniform(0.3, 0.7))),
        stripe_freq=float(rng.uniform(1.5, 5.0)),
        stripe_phase=float(rng.uniform(0, 2 * np.pi)),
        stripe_amp=float(rng.uniform(0.15, 0.45)),
    )


def render(look: PersonLook, schema: AttributeSchema, camera: int, image_seed: int,
           size=(96, 32), noise=0.03, vertical_jitter=0.0, clutter=0, camera_cast=False) -> np.ndarray:
    """Render one (H, W, 3) float image in [0, 1]."""
    rng = np.random.default_rng(image_seed)
    H, W = size
    img = np.empty((H, W, 3))
    img[:] = CAMERA_COLORS[camera % len(CAMERA_COLORS)]
    img += rng.normal(0, 0.02, size=(H, 1, 1))
    for _ in range(clutter):
        h, w = int(rng.integers(4, H // 3)), int(rng.integers(3, W // 2))
        y, x = int(rng.integers(0, H - h)), int(rng.integers(0, W - w))
        img[y:y + h, x:x + w] = rng.uniform(0.15, 0.75, size=3)

    ident = schema["identity"]
    id_digits = ident.digits(look.sids["identity"])
    # figure geometry
    scale = 1.0 - vertical_jitter * rng.uniform() if vertical_jitter > 0 else 0.96
    ph = scale * H
    top = rng.uniform(0, H - ph) if vertical_jitter > 0 else 0.02 * H
    aspect = 0.5
    if len(id_digits) > 1:
        aspect = 0.42 + 0.24 * id_digits[1] / max(len(ident.attributes[1].labels) - 1, 1)
    pw = W * (aspect + look.width_jitter)
    cx = W / 2 + rng.uniform(-1.5, 1.5)
    x0, x1 = cx - pw / 2, cx + pw / 2

    def rows(a, b):
        return int(round(top + a * ph)), int(round(top + b * ph))

    def cols(a, b):
        return int(round(max(a, 0))), int(round(min(b, W)))

    person = np.zeros((H, W), dtype=bool)

    for gname, (ra, rb) in REGIONS.items():
        group = schema[gname]
        digits = group.digits(look.sids[gname])
        r0, r1 = rows(ra, rb)
        # head is narrower than the body
        inset = pw * 0.2 if gname == "head" else 0.0
        c0, c1 = cols(x0 + inset, x1 - inset)
        first = group.attributes[0]
        color = _label_color(first.labels[digits[0]], digits[0], GROUPS.index(gname) * 3)
        if gname == "head":
            # face below a coloured band
            skin = np.array(SKIN_TONES[id_digits[0] % len(SKIN_TONES)])
            img[r0:r1, c0:c1] = skin
            band = r0 + max(1, int(round((r1 - r0) * 0.45)))
            img[r0:band, c0:c1] = color
        else:
            img[r0:r1, c0:c1] = color
        person[r0:r1, c0:c1] = True
        # further attributes: symmetric side strips, length encodes the label
        for j, (attr, d) in enumerate(zip(group.attributes[1:], digits[1:])):
            frac = (d + 1) / len(attr.labels)
            length = max(1, int(round((r1 - r0) * frac)))
            sc = np.array(STRIP_COLORS[(GROUPS.index(gname) + j) % len(STRIP_COLORS)])
            w = 3
            left = c0 - w * (j + 1)
            right = c1 + w * j
            for a in (left, right):
                lo, hi = cols(a, a + w)
                img[r0:r0 + length, lo:hi] = sc
                person[r0:r0 + length, lo:hi] = True

    # identity texture: logo on the torso, stripes on the legs
    u0, u1 = rows(*REGIONS["upper_body"])
    c0, c1 = cols(x0, x1)
    ls = max(3, int(round(min(u1 - u0, c1 - c0) * 0.7)))
    ly = u0 + int(round((u1 - u0 - ls) * look.logo_pos[0]))
    lx = c0 + int(round((c1 - c0 - ls) * look.logo_pos[1]))
    cell = np.repeat(np.repeat(look.logo, -(-ls // 3), axis=0), -(-ls // 3), axis=1)[:ls, :ls]
    img[ly:ly + ls, lx:lx + ls] = cell[: max(0, min(ls, H - ly)), : max(0, min(ls, W - lx))]
    l0, l1 = rows(*REGIONS["lower_body"])
    yy = np.arange(l0, min(l1, H))
    mod = 1.0 + look.stripe_amp * np.sin(2 * np.pi * look.stripe_freq * (yy - l0) / max(l1 - l0, 1) + look.stripe_phase)
    img[l0:l1, c0:c1] *= mod[:, None, None]

    # carrying: blobs beside the body
    carry = schema["carrying"]
    for j, (attr, d) in enumerate(zip(carry.attributes, carry.digits(look.sids["carrying"]))):
        if d == 0:
            continue
        bh = ph * (0.22 + 0.04 * (d - 1))
        cy = top + ph * (0.28 + 0.22 * j)
        r0, r1 = int(round(cy)), int(round(cy + bh))
        bw = 10
        # straddles the body outline
        side = x0 - bw / 2 if j % 2 == 0 else x1 - bw / 2
        lo, hi = cols(side, side + bw)
        img[r0:r1, lo:hi] = BLOB_COLORS[j % len(BLOB_COLORS)]
        person[r0:r1, lo:hi] = True

    # identity tone applied to the whole figure
    tone = 1.2 - 0.4 * id_digits[0] / max(len(ident.attributes[0].labels) - 1, 1)
    img[person] = np.clip(img[person] * tone, 0, 1)
    if camera_cast:
        img *= np.array(CAMERA_CASTS[camera % len(CAMERA_CASTS)])
    img *= rng.uniform(0.93, 1.07)
    img += rng.normal(0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(spec: SyntheticSpec, schema: AttributeSchema, seed: int = 0) -> dict[str, DatasetSplit]:
    """Deterministic train/query/gallery splits; test identities are disjoint from train."""
    rng = np.random.default_rng(seed)
    held = parse_holdout(spec.holdout, schema)
    n_tr, n_te = spec.num_train_persons, spec.num_test_persons
    forced = [(g, k) for g in GROUPS for k in sorted(held[g])]
    if len(forced) * spec.holdout_test_persons > n_te:
        raise SchemaError("more held-out SID carriers requested than test persons")

    train_sids = _replicated_sids(n_tr, spec.train_persons_per_combo, schema, rng, held)
    test_sids = _replicated_sids(n_te, spec.persons_per_combo, schema, rng, {g: set() for g in GROUPS})
    slot = 0
    for g, k in forced:
        for _ in range(spec.holdout_test_persons):
            test_sids[slot][g] = k
            slot += 1
    if slot and spec.persons_per_combo > 1:
        # keep persons of one combination identical after forcing
        for p in range(n_te):
            test_sids[p] = dict(test_sids[p - p % spec.persons_per_combo])

    looks = [_make_look(p, s, rng) for p, s in enumerate(train_sids)]
    looks += [_make_look(n_tr + p, s, rng) for p, s in enumerate(test_sids)]

    def emit(look, cams):
        out = []
        for cam in cams:
            image_seed = int(rng.integers(2**31))
            out.append((look, int(cam), image_seed))
        return out

    plan = {"train": [], "query": [], "gallery": []}
    for look in looks[:n_tr]:
        plan["train"] += emit(look, np.resize(rng.permutation(spec.num_cameras), spec.train_images_per_person))
    for look in looks[n_tr:]:
        qcam = int(rng.integers(spec.num_cameras))
        others = [c for c in range(spec.num_cameras) if c != qcam] or [qcam]
        plan["query"] += emit(look, [qcam] * spec.query_per_person)
        plan["gallery"] += emit(look, np.resize(rng.permutation(others), spec.gallery_per_person))

    splits = {}
    for role, items in plan.items():
        records, images = [], []
        for look, cam, image_seed in items:
            sids = {g: schema[g].sid(look.sids[g]) for g in GROUPS}
            records.append(PersonRecord(image_seed, look.person_id, cam, sids))
            img = render(look, schema, cam, image_seed, spec.image_size, spec.noise, spec.vertical_jitter,
                         spec.clutter, spec.camera_cast)
            images.append(np.round(img * 255).astype(np.uint8))
        splits[role] = DatasetSplit(records, role, schema, np.stack(images), tuple(spec.image_size))
    return splits


def write_dataset(splits: dict[str, DatasetSplit], root) -> Path:
    """Write in-memory splits as an image directory plus ``attributes.csv``."""
    from PIL import Image

    root = Path(root)
    people = {}
    for role, split in splits.items():
        folder = root / role
        folder.mkdir(parents=True, exist_ok=True)
        for i, r in enumerate(split.records):
            Image.fromarray(split.images[i]).save(folder / f"{r.person_id:04d}_c{r.camera_id}_{i:05d}.png")
            people[r.person_id] = split.schema.labels_of({g: r.sid_index(g) for g in GROUPS})
    schema = next(iter(splits.values())).schema
    with open(root / "attributes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["person_id", *schema.attribute_names])
        for pid in sorted(people):
            w.writerow([pid, *(people[pid][a] for a in schema.attribute_names)])
    return root / "attributes.csv"
