import numpy as np
import pytest
from PIL import Image

from sidreid.data import (AugmentConfig, DatasetError, DatasetSplit, PersonRecord, SamplerConfig, apply_augmentation,
                          load_dataset, read_annotations, sample_batch, validate_identity_count)
from sidreid.schema import GROUPS, SchemaError
from sidreid.synthetic import PersonLook, SyntheticSpec, generate_synthetic, render, write_dataset


def make_split(schema, pids, sid_rows=None, images_per_person=1):
    records = []
    for n, p in enumerate(pids):
        row = sid_rows[n] if sid_rows is not None else [0] * 5
        sids = {g: schema[g].sid(int(k)) for g, k in zip(GROUPS, row)}
        for i in range(images_per_person):
            records.append(PersonRecord(f"{p}_{i}", p, i % 2, sids))
    return DatasetSplit(records, "train", schema)


def test_sid_counts_count_persons(synth_schema):
    rows = [[0, 0, 0, 2 if p < 3 else 0, 0] for p in range(10)]
    split = make_split(synth_schema, list(range(10)), rows)
    counts = split.sid_counts()
    assert counts["identity"][2] == 3 and split.num_persons == 10
    for g in GROUPS:
        assert counts[g].sum() == 10


def test_duplicating_images_leaves_counts_unchanged(synth_schema):
    rng = np.random.default_rng(0)
    rows = [[int(rng.integers(synth_schema[g].num_sids)) for g in GROUPS] for _ in range(8)]
    once = make_split(synth_schema, list(range(8)), rows).sid_counts()
    many = make_split(synth_schema, list(range(8)), rows, images_per_person=5).sid_counts()
    for g in GROUPS:
        assert np.array_equal(once[g], many[g])


def test_annotation_with_unknown_label_is_rejected(tmp_path, synth_schema):
    names = synth_schema.attribute_names
    good = {"hat": "absent", "hair_length": "short", "top_color": "red", "sleeve_length": "short",
            "bottom_color": "black", "bottom_length": "long", "age": "adult", "gender": "male",
            "backpack": "absent", "bag": "present"}
    path = tmp_path / "a.csv"
    path.write_text("person_id," + ",".join(names) + "\n1," + ",".join(good[n] for n in names) + "\n")
    assert read_annotations(path, synth_schema)[1]["identity"].label_choice == ("adult", "male")
    bad = dict(good, top_color="teal")
    path.write_text("person_id," + ",".join(names) + "\n1," + ",".join(bad[n] for n in names) + "\n")
    with pytest.raises(DatasetError, match="teal"):
        read_annotations(path, synth_schema)


def test_load_dataset_round_trip(tmp_path, small_splits):
    ann = write_dataset(small_splits, tmp_path)
    loaded = load_dataset(tmp_path, small_splits["train"].schema, ann, image_size=(96, 32))
    for role in ("train", "query", "gallery"):
        assert len(loaded[role]) == len(small_splits[role])
        assert np.array_equal(np.sort(loaded[role].person_ids), np.sort(small_splits[role].person_ids))
    # png storage is lossless
    img = loaded["train"].load_images([0])[0]
    name = __import__("pathlib").Path(loaded["train"].records[0].image_ref).name
    i = int(name.rsplit("_", 1)[1].split(".")[0])
    assert np.array_equal(np.round(img * 255).astype(np.uint8), small_splits["train"].images[i])


def test_missing_annotation_and_junk_ids(tmp_path, synth_schema, small_splits):
    ann = write_dataset(small_splits, tmp_path)
    Image.new("RGB", (32, 96)).save(tmp_path / "train" / "-1_c1_99999.png")
    load_dataset(tmp_path, synth_schema, ann)  # junk id skipped
    Image.new("RGB", (32, 96)).save(tmp_path / "train" / "9999_c1_99999.png")
    with pytest.raises(DatasetError, match="9999"):
        load_dataset(tmp_path, synth_schema, ann)


def test_identity_count_validator(tmp_path, synth_schema):
    split = make_split(synth_schema, list(range(751)))
    validate_identity_count(split, "market")
    with pytest.raises(DatasetError, match="751"):
        validate_identity_count(split.subset(range(700)), "market")
    with pytest.raises(DatasetError, match="702"):
        validate_identity_count(split, "duke")


def test_market_layout_with_identity_validation(tmp_path, synth_schema):
    folder = tmp_path / "bounding_box_train"
    folder.mkdir()
    rows = ["person_id," + ",".join(synth_schema.attribute_names)]
    labels = ",".join(a.labels[0] for g in synth_schema for a in g.attributes)
    for p in range(1, 752):
        Image.new("RGB", (4, 8)).save(folder / f"{p:04d}_c1s1_000151_01.jpg")
        rows.append(f"{p},{labels}")
    (tmp_path / "attributes.csv").write_text("\n".join(rows) + "\n")
    splits = load_dataset(tmp_path, synth_schema, tmp_path / "attributes.csv", expected_train_ids="market")
    assert splits["train"].num_persons == 751


# synthetic generation ------------------------------------------------------

def test_generation_is_deterministic(synth_schema):
    spec = SyntheticSpec(num_train_persons=6, num_test_persons=4, train_images_per_person=3)
    a, b = generate_synthetic(spec, synth_schema, 7), generate_synthetic(spec, synth_schema, 7)
    for role in a:
        assert np.array_equal(a[role].images, b[role].images)
        assert a[role].records == b[role].records
    c = generate_synthetic(spec, synth_schema, 8)
    assert not np.array_equal(a["train"].images, c["train"].images)


def test_same_sids_different_texture_gives_distinct_images(synth_schema):
    sids = {g: 0 for g in GROUPS}
    rng = np.random.default_rng(0)

    def look(pid):
        return PersonLook(pid, sids, 0.0, rng.uniform(size=(3, 3, 3)), (0.5, 0.5), 3.0, 0.0, 0.2)

    a = render(look(0), synth_schema, 0, 1, noise=0.0)
    b = render(look(1), synth_schema, 0, 1, noise=0.0)
    assert a.shape == (96, 32, 3)
    assert np.abs(a - b).max() > 0.1


def test_split_structure(small_splits):
    train, query, gallery = small_splits["train"], small_splits["query"], small_splits["gallery"]
    assert not set(train.person_ids) & set(query.person_ids)
    assert set(query.person_ids) == set(gallery.person_ids)
    for q in query.records:
        cams = {g.camera_id for g in gallery.records if g.person_id == q.person_id}
        assert q.camera_id not in cams
    # attributes are per identity
    for split in small_splits.values():
        for pid, idx in split.indices_by_person().items():
            assert len({tuple(split.sid_matrix()[i]) for i in idx}) == 1


def test_holdout_excludes_sid_from_train(synth_schema):
    spec = SyntheticSpec(num_train_persons=30, num_test_persons=8, train_images_per_person=2,
                         holdout=("upper_body:5",), holdout_test_persons=2)
    splits = generate_synthetic(spec, synth_schema, 0)
    col = GROUPS.index("upper_body")
    assert 5 not in splits["train"].sid_matrix()[:, col]
    assert 5 in splits["query"].sid_matrix()[:, col]
    assert 5 in splits["gallery"].sid_matrix()[:, col]


def test_holdout_rejects_unknown_sid(synth_schema):
    with pytest.raises(SchemaError, match="exceeds"):
        generate_synthetic(SyntheticSpec(holdout=("head:9",)), synth_schema)


def test_look_alike_persons_share_every_sid(synth_schema):
    spec = SyntheticSpec(num_train_persons=4, num_test_persons=6, persons_per_combo=2, train_images_per_person=2)
    ps = generate_synthetic(spec, synth_schema, 1)["query"].person_sids()
    pids = sorted(ps)
    for a, b in zip(pids[::2], pids[1::2]):
        assert ps[a] == ps[b]


# batch sampling ------------------------------------------------------------

def test_pk_batch_shape(synth_schema):
    split = make_split(synth_schema, list(range(20)), images_per_person=6)
    batch = sample_batch(split, SamplerConfig(16, 4), np.random.default_rng(0))
    assert len(batch.indices) == 64
    assert len(set(batch.person_ids)) == 16


def test_every_batch_has_k_images_per_identity(synth_schema):
    rng = np.random.default_rng(1)
    split = make_split(synth_schema, list(range(12)), images_per_person=3)
    cfg = SamplerConfig(5, 4)
    for _ in range(1000):
        batch = sample_batch(split, cfg, rng)
        _, counts = np.unique(batch.person_ids, return_counts=True)
        assert len(counts) == 5 and (counts == 4).all()
        assert (split.person_ids[batch.indices] == batch.person_ids).all()


def test_minimal_batch(synth_schema):
    split = make_split(synth_schema, [7, 9], images_per_person=2)
    batch = sample_batch(split, SamplerConfig(2, 2), np.random.default_rng(0))
    assert sorted(batch.person_ids.tolist()) == [7, 7, 9, 9]


def test_single_image_person_is_repeated(synth_schema):
    split = make_split(synth_schema, [1, 2], images_per_person=1)
    batch = sample_batch(split, SamplerConfig(2, 4), np.random.default_rng(0))
    for p in (1, 2):
        assert len(set(batch.indices[batch.person_ids == p].tolist())) == 1
        assert (batch.person_ids == p).sum() == 4


def test_sampler_rejects_small_split_and_bad_config(synth_schema):
    with pytest.raises(DatasetError):
        sample_batch(make_split(synth_schema, [1, 2]), SamplerConfig(3, 2), np.random.default_rng(0))
    with pytest.raises(ValueError):
        SamplerConfig(1, 4)


def test_augmentation(small_splits):
    split = small_splits["train"]
    batch = sample_batch(split, SamplerConfig(4, 2), np.random.default_rng(0), AugmentConfig(erase_prob=1.0))
    images = split.load_images(batch.indices)
    out = apply_augmentation(images, batch)
    assert out.shape == images.shape and (batch.erase_boxes[:, 2] > 0).all()
    plain = sample_batch(split, SamplerConfig(4, 2), np.random.default_rng(0), AugmentConfig(flip=False, erase_prob=0))
    assert np.array_equal(apply_augmentation(split.load_images(plain.indices), plain),
                          split.load_images(plain.indices))
