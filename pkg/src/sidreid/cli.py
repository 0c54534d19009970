"""Command-line entry point: ``sidreid train|eval|search|recognize|export``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import load_config
from .data import read_image
from .retrieval import GalleryIndex, aps_scores, parse_query, rank
from .schema import SchemaError
from .workbench import (CheckpointError, Trainer, build_splits, evaluate, extract, gallery_index, load_model,
                        recognize)

log = logging.getLogger("sidreid")


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sidreid", description="Semantic-ID person re-identification workbench.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a YAML run config")
    p.add_argument("--config", required=True, help="run config path or the name of a shipped config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config field by dotted path, e.g. optim.iterations=500")
    p.add_argument("--output", help="output directory (defaults to output_dir in the config, then ./runs/<config>)")
    p.add_argument("--no-eval", action="store_true", help="skip the evaluation after training")

    p = sub.add_parser("eval", help="reID, APS and PAR metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="query,gallery", metavar="QUERY[,GALLERY]",
                   help="split names of the query and gallery sets (default: query,gallery)")
    p.add_argument("--protocol-filter", type=_on_off, default=None, metavar="on|off",
                   help="drop same-person same-camera gallery items (default: the run config's setting)")
    p.add_argument("--output", help="results JSON path (default: next to the checkpoint)")

    p = sub.add_parser("search", help="rank a gallery against a text attribute query")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--query", required=True, help='e.g. "identity:gender=female carrying:backpack=present"')
    p.add_argument("--groups", help="comma-separated subset of the query's groups to keep")
    p.add_argument("--gallery", default="gallery", help="split name or a saved gallery index file")
    p.add_argument("--top", type=int, default=10)

    p = sub.add_parser("recognize", help="predict attribute labels for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)

    p = sub.add_parser("export", help="write embeddings or alignment heat maps for a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--what", required=True, choices=("embeddings", "heatmaps"))
    p.add_argument("--split", default="gallery")
    p.add_argument("--output", help="output path (default: next to the checkpoint)")
    return ap


def _pick(splits, name):
    if name not in splits:
        raise SystemExit(f"unknown split {name!r}; available: {', '.join(splits)}")
    return splits[name]


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.overrides)
    out = Path(args.output or cfg.output_dir or Path("runs") / Path(args.config).stem)
    cfg = cfg.replace(output_dir=str(out))
    trainer = Trainer(cfg)
    trainer.run()
    ckpt = trainer.save(out / "checkpoint.pt")
    results = {"checkpoint": str(ckpt), "iterations": trainer.iteration, "final_losses": trainer.history[-1]}
    summary = [f"checkpoint  {ckpt}", f"final loss  {trainer.history[-1]['total']:.4f}"]
    if not args.no_eval and {"query", "gallery"} <= set(trainer.splits):
        report = evaluate(trainer.model, trainer.splits, trainer.schema, cfg.eval_protocol_filter)
        results["eval"] = report.to_dict()
        summary.append(report.summary())
    (out / "results.json").write_text(json.dumps(results, indent=2))
    (out / "summary.txt").write_text("\n".join(summary) + "\n")
    print("\n".join(summary))
    return 0


def cmd_eval(args) -> int:
    model, cfg, schema = load_model(args.checkpoint)
    splits = build_splits(cfg, schema)
    q_name, _, g_name = args.split.partition(",")
    pair = {"query": _pick(splits, q_name), "gallery": _pick(splits, g_name or "gallery")}
    pf = cfg.eval_protocol_filter if args.protocol_filter is None else args.protocol_filter
    report = evaluate(model, pair, schema, protocol_filter=pf)
    out = Path(args.output) if args.output else Path(args.checkpoint).with_suffix(".eval.json")
    report.to_json(out)
    out.with_suffix(".txt").write_text(report.summary() + "\n")
    print(report.summary())
    return 0


def cmd_search(args) -> int:
    model, cfg, schema = load_model(args.checkpoint)
    query = parse_query(args.query, schema)
    if args.groups:
        query = query.restrict([schema[g.strip()].name for g in args.groups.split(",")])
    if Path(args.gallery).is_file():
        gallery = GalleryIndex.load(args.gallery, schema.hash)
    else:
        gallery = gallery_index(model, _pick(build_splits(cfg, schema), args.gallery))
    result = rank(aps_scores(query, model.bank.snapshot(), gallery.feats), query=dict(query.candidates))
    for pos, (i, s) in enumerate(zip(result.indices[: args.top], result.scores), 1):
        ref = gallery.image_refs[i] if gallery.image_refs else i
        line = f"{pos:3d}  score {s:.4f}  person {int(gallery.person_ids[i])}  camera {int(gallery.camera_ids[i])}  {ref}"
        if gallery.sids is not None:
            labels = schema.labels_of(dict(zip(schema.group_names, gallery.sids[i])))
            line += "  " + " ".join(f"{k}={v}" for k, v in labels.items())
        print(line)
    return 0


def cmd_recognize(args) -> int:
    model, cfg, schema = load_model(args.checkpoint)
    image = read_image(args.image, tuple(cfg.model.image_size))
    labels = recognize(model, image[None], schema)[0]
    print(json.dumps(labels, indent=2))
    return 0


def cmd_export(args) -> int:
    model, cfg, schema = load_model(args.checkpoint)
    split = _pick(build_splits(cfg, schema), args.split)
    base = Path(args.checkpoint).with_suffix("")
    if args.what == "embeddings":
        out = Path(args.output) if args.output else base.with_name(f"{base.name}_{args.split}.idx")
        path, side = gallery_index(model, split).save(out, schema.hash)
        print(f"wrote {path} and {side}")
    else:
        out = Path(args.output) if args.output else base.with_name(f"{base.name}_{args.split}_heat.npz")
        _, heat, bounds = extract(model, split, with_heat=True)
        np.savez_compressed(out, heat=heat, top=bounds[:, 0], bottom=bounds[:, 1], sigma=cfg.model.sigma,
                            person_ids=split.person_ids, camera_ids=split.camera_ids,
                            image_refs=np.array([str(r.image_ref) for r in split.records]))
        print(f"wrote {out}")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "search": cmd_search, "recognize": cmd_recognize,
            "export": cmd_export}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (SchemaError, CheckpointError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
