import math

import numpy as np
import pytest

from sidreid.retrieval import (AttributeQuery, GalleryIndex, aps_score, aps_scores, par_labels, par_predict,
                               parse_query, rank, reid_score, reid_scores)
from sidreid.schema import GROUPS, SchemaError


def unit(*v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def random_protos(rng, schema, d):
    return {g.name: rng.normal(size=(g.num_sids, d)) for g in schema}


def test_reid_score_examples():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(5, 4))
    assert reid_score(a, a) == pytest.approx(1.0)
    e0, e1 = np.eye(4)[0], np.eye(4)[1]
    b = np.stack([e0, e0, e0, e1, e1])
    c = np.stack([e0 * 2, e0, e0 * 0.5, e0, e0])
    assert reid_score(b, c) == pytest.approx(0.6)
    assert reid_score(np.tile(e0, (5, 1)), np.tile(e1, (5, 1))) == 0.0


def test_reid_score_symmetry_and_matrix_form():
    rng = np.random.default_rng(1)
    q, g = rng.normal(size=(3, 5, 6)), rng.normal(size=(4, 5, 6))
    m = reid_scores(q, g)
    for i in range(3):
        for j in range(4):
            assert m[i, j] == pytest.approx(reid_score(q[i], g[j]))
            assert reid_score(q[i], g[j]) == pytest.approx(reid_score(g[j], q[i]))
    with pytest.raises(ValueError):
        reid_scores(q, rng.normal(size=(4, 5, 7)))


def test_full_aps_equals_reid_with_prototypes_substituted(synth_schema):
    rng = np.random.default_rng(2)
    for _ in range(200):
        protos = random_protos(rng, synth_schema, 8)
        sids = {g.name: int(rng.integers(g.num_sids)) for g in synth_schema}
        item = rng.normal(size=(5, 8))
        query_reps = np.stack([protos[g][sids[g]] for g in GROUPS])
        q = AttributeQuery.from_sids(sids)
        assert aps_score(q, protos, item) == reid_score(query_reps, item)


def test_single_group_aligned_prototype_scores_one(synth_schema):
    rng = np.random.default_rng(3)
    protos = random_protos(rng, synth_schema, 6)
    item = rng.normal(size=(5, 6))
    item[GROUPS.index("identity")] = 4.0 * protos["identity"][2]
    assert aps_score(AttributeQuery({"identity": (2,)}), protos, item) == pytest.approx(1.0)


def test_partial_query_averages_present_groups(synth_schema):
    rng = np.random.default_rng(4)
    protos = random_protos(rng, synth_schema, 6)
    item = rng.normal(size=(5, 6))
    groups = ("lower_body", "identity", "carrying")
    q = AttributeQuery({g: (1,) for g in groups})
    sims = [unit(*item[GROUPS.index(g)]) @ unit(*protos[g][1]) for g in groups]
    assert aps_score(q, protos, item) == pytest.approx(sum(sims) / 3)


def test_partially_specified_group_takes_best_consistent_sid(synth_schema):
    rng = np.random.default_rng(5)
    protos = random_protos(rng, synth_schema, 6)
    gallery = rng.normal(size=(7, 5, 6))
    q = parse_query("identity:gender=female", synth_schema)
    assert q.candidates["identity"] == (1, 3, 5)
    expected = np.max([aps_scores(AttributeQuery({"identity": (k,)}), protos, gallery) for k in (1, 3, 5)], axis=0)
    assert np.allclose(aps_scores(q, protos, gallery), expected)


def test_parse_query(synth_schema):
    q = parse_query("identity:gender=female,age=adult carrying:backpack=present", synth_schema)
    assert q.present_groups == ("identity", "carrying")
    assert q.candidates["identity"] == (synth_schema["identity"].index_of_digits([1, 1]),)
    assert q.candidates["carrying"] == (2, 3)
    assert parse_query("group=head:hat=present", synth_schema).candidates == {"head": (2, 3)}
    assert q.restrict(["carrying"]).present_groups == ("carrying",)
    for bad in ("identity:gender=teal", "wings:size=big", "identity gender"):
        with pytest.raises(SchemaError):
            parse_query(bad, synth_schema)


def test_aps_rejects_out_of_range_sid(synth_schema):
    protos = random_protos(np.random.default_rng(0), synth_schema, 4)
    with pytest.raises(SchemaError):
        aps_scores(AttributeQuery({"head": (9,)}), protos, np.ones((1, 5, 4)))


def test_par_exact_and_angular_examples(synth_schema):
    rng = np.random.default_rng(6)
    protos = random_protos(rng, synth_schema, 4)
    reps = np.stack([protos[g][k] for g, k in zip(GROUPS, (1, 0, 2, 3, 1))])
    assert par_predict(reps, protos).tolist() == [1, 0, 2, 3, 1]
    deg = math.radians
    two = {g: np.array([[1.0, 0.0], [math.cos(deg(90)), math.sin(deg(90))]]) for g in GROUPS}
    f = np.tile([math.cos(deg(10)), math.sin(deg(10))], (5, 1))
    assert par_predict(f, two).tolist() == [0] * 5


def test_par_scale_invariance(synth_schema):
    rng = np.random.default_rng(7)
    for _ in range(1000):
        protos = random_protos(rng, synth_schema, 5)
        reps = rng.normal(size=(3, 5, 5))
        scaled_protos = {g: p * rng.uniform(0.01, 100, size=(len(p), 1)) for g, p in protos.items()}
        scaled_reps = reps * rng.uniform(0.01, 100, size=(3, 5, 1))
        assert np.array_equal(par_predict(reps, protos), par_predict(scaled_reps, scaled_protos))


def test_par_ties_go_to_smallest_index():
    protos = {g: np.array([[1.0, 0.0], [1.0, 0.0]]) for g in GROUPS}
    assert par_predict(np.ones((5, 2)), protos).tolist() == [0] * 5


def test_par_labels_expand(synth_schema):
    labels = par_labels(np.array([0, 0, 0, synth_schema["identity"].index_of_digits([1, 1]), 0]), synth_schema)[0]
    assert labels["age"] == "adult" and labels["gender"] == "female"


def test_rank_order_and_ties():
    assert rank(np.array([0.2, 0.9, 0.5])).indices.tolist() == [1, 2, 0]
    assert rank(np.array([0.5, 0.5])).indices.tolist() == [0, 1]


def test_rank_protocol_filter():
    r = rank(np.array([0.9, 0.8, 0.1]), query_pid=3, query_cam=1, gallery_pids=np.array([3, 3, 4]),
             gallery_cams=np.array([1, 2, 1]), protocol_filter=True)
    assert r.indices.tolist() == [1, 2]
    assert r.scores.tolist() == [0.8, 0.1]


def test_rank_is_a_permutation():
    rng = np.random.default_rng(8)
    for _ in range(100):
        n = int(rng.integers(1, 30))
        assert sorted(rank(rng.normal(size=n)).indices.tolist()) == list(range(n))


def test_gallery_index_round_trip(tmp_path, synth_schema):
    rng = np.random.default_rng(9)
    idx = GalleryIndex(rng.normal(size=(6, 5, 4)), np.arange(6), np.arange(6) % 2,
                       rng.integers(0, 2, size=(6, 5)), [f"img{i}.png" for i in range(6)])
    path, side = idx.save(tmp_path / "g.idx", synth_schema.hash)
    back = GalleryIndex.load(path, synth_schema.hash)
    assert np.array_equal(back.feats, idx.feats)
    assert np.array_equal(back.sids, idx.sids) and back.image_refs == idx.image_refs
    assert np.allclose(np.linalg.norm(back.feats, axis=-1), 1.0, atol=1e-6)
    with pytest.raises(ValueError, match="schema"):
        GalleryIndex.load(path, "0" * 16)
