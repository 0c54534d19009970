import dataclasses
import json

import numpy as np
import pytest
from PIL import Image

from sidreid.cli import main
from sidreid.retrieval import GalleryIndex
from sidreid.schema import GROUPS
from sidreid.synthetic import generate_synthetic
from sidreid.workbench import gallery_index


@pytest.fixture(scope="module")
def quick_checkpoint(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    rc = main(["train", "--config", "synthetic_run.yaml", "--output", str(out),
               "--set", "optim.iterations=30", "--set", "optim.warmup_iterations=5",
               "--set", "data.synthetic.num_train_persons=12", "--set", "data.synthetic.num_test_persons=6"])
    assert rc == 0
    return out / "checkpoint.pt"


def test_train_writes_results(quick_checkpoint):
    out = quick_checkpoint.parent
    results = json.loads((out / "results.json").read_text())
    assert results["iterations"] == 30 and "eval" in results
    assert "reID" in (out / "summary.txt").read_text()
    assert len((out / "metrics.jsonl").read_text().splitlines()) == 1  # log_every 100 -> iteration 0 only


@pytest.mark.parametrize("flag", ["on", "off"])
def test_eval(quick_checkpoint, tmp_path, capsys, flag):
    out = tmp_path / "eval.json"
    assert main(["eval", "--checkpoint", str(quick_checkpoint), "--protocol-filter", flag, "--output", str(out)]) == 0
    report = json.loads(out.read_text())
    assert 0 <= report["mAP"] <= 1 and report["num_queries"] == 6
    assert "rank-1" in capsys.readouterr().out


def test_eval_unknown_split(quick_checkpoint):
    with pytest.raises(SystemExit):
        main(["eval", "--checkpoint", str(quick_checkpoint), "--split", "nope"])


def test_search_rejects_unknown_label(quick_checkpoint, capsys):
    assert main(["search", "--checkpoint", str(quick_checkpoint), "--query", "upper_body:top_color=teal"]) == 2
    assert "teal" in capsys.readouterr().err


def test_export_and_search_saved_index(quick_checkpoint, tmp_path, capsys):
    idx = tmp_path / "g.idx"
    assert main(["export", "--checkpoint", str(quick_checkpoint), "--what", "embeddings", "--output", str(idx)]) == 0
    gallery = GalleryIndex.load(idx)
    assert gallery.feats.shape[1:] == (5, 64)
    capsys.readouterr()
    assert main(["search", "--checkpoint", str(quick_checkpoint), "--query", "head:hat=present",
                 "--gallery", str(idx), "--top", "3"]) == 0
    assert len(capsys.readouterr().out.strip().splitlines()) == 3


def test_search_rejects_index_of_other_schema(quick_checkpoint, tmp_path, capsys):
    idx = GalleryIndex(np.ones((2, 5, 4)), np.array([1, 2]), np.array([0, 0]))
    path, _ = idx.save(tmp_path / "other.idx", "f" * 16)
    assert main(["search", "--checkpoint", str(quick_checkpoint), "--query", "head:hat=present",
                 "--gallery", str(path)]) == 2
    assert "schema" in capsys.readouterr().err


def test_export_heatmaps(quick_checkpoint, tmp_path):
    out = tmp_path / "heat.npz"
    assert main(["export", "--checkpoint", str(quick_checkpoint), "--what", "heatmaps", "--output", str(out)]) == 0
    data = np.load(out)
    assert data["heat"].shape[1:] == (6, 2)
    assert (data["top"] <= data["bottom"]).all()


# ground-truth checks against the fully trained desk model ------------------

def test_search_top_results_match_rendered_attributes(desk_run, tmp_path, capsys):
    # a fresh gallery of unseen persons, large enough to contain the queried combination
    spec = dataclasses.replace(desk_run.cfg.data.synthetic, num_train_persons=2, num_test_persons=40)
    split = generate_synthetic(spec, desk_run.trainer.schema, seed=101)["gallery"]
    labels = [desk_run.trainer.schema.labels_of({g: r.sid_index(g) for g in GROUPS}) for r in split.records]
    matching = [l["gender"] == "female" and l["age"] == "adult" and l["backpack"] == "present" for l in labels]
    assert sum(matching) >= 3
    path, _ = gallery_index(desk_run.trainer.model, split).save(tmp_path / "fresh.idx", desk_run.trainer.schema.hash)
    query = "identity:gender=female,age=adult carrying:backpack=present"
    assert main(["search", "--checkpoint", str(desk_run.checkpoint), "--query", query, "--top", "3",
                 "--gallery", str(path)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 3
    for line in lines:
        assert "gender=female" in line and "age=adult" in line and "backpack=present" in line


def test_recognize_synthetic_image(desk_run, tmp_path, capsys):
    gallery = desk_run.trainer.splits["gallery"]
    path = tmp_path / "person.png"
    Image.fromarray(gallery.images[0]).save(path)
    assert main(["recognize", "--checkpoint", str(desk_run.checkpoint), "--image", str(path)]) == 0
    labels = json.loads(capsys.readouterr().out)
    record = gallery.records[0]
    truth = desk_run.trainer.schema.labels_of({g: record.sid_index(g) for g in GROUPS})
    assert labels == truth
