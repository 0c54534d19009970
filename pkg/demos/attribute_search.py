"""Search a trained model's gallery with text attribute queries and check the hits against the renderer's truth.

    python demos/attribute_search.py runs/quickstart/checkpoint.pt
"""

import argparse

import numpy as np

from sidreid.retrieval import aps_scores, parse_query
from sidreid.schema import GROUPS
from sidreid.workbench import build_splits, gallery_index, load_model

QUERIES = [
    "identity:gender=female,age=adult",
    "carrying:backpack=present",
    "identity:gender=male carrying:backpack=absent",
    "head:hat=present",
]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("checkpoint")
    ap.add_argument("--top", type=int, default=5)
    args = ap.parse_args()

    model, cfg, schema = load_model(args.checkpoint)
    gallery = build_splits(cfg, schema)["gallery"]
    index = gallery_index(model, gallery)
    protos = model.bank.snapshot()
    truth = [schema.labels_of({g: r.sid_index(g) for g in GROUPS}) for r in gallery.records]

    for text in QUERIES:
        query = parse_query(text, schema)
        wanted = dict(pair.split("=") for term in text.split() for pair in term.split(":", 1)[1].split(","))
        scores = aps_scores(query, protos, index.feats)
        top = np.argsort(-scores, kind="stable")[:args.top]
        hits = sum(all(truth[i][k] == v for k, v in wanted.items()) for i in top)
        print(f"\n{text}\n  {hits}/{len(top)} of the top results carry every requested label")
        for i in top:
            flags = " ".join(f"{k}={truth[i][k]}" for k in wanted)
            print(f"  {scores[i]:.3f}  person {gallery.records[i].person_id:4d}  {flags}")


if __name__ == "__main__":
    main()
