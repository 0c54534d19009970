"""Train the desk model on rendered persons, then report reID, APS and PAR.

    python demos/quickstart.py --iterations 2000 --output runs/quickstart
"""

import argparse
from pathlib import Path

from sidreid.config import desk_config
from sidreid.workbench import Trainer, evaluate


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--output", default="runs/quickstart")
    args = ap.parse_args()

    cfg = desk_config(**{"log_every": 0, "optim.iterations": args.iterations,
                         "optim.warmup_iterations": max(1, args.iterations // 10)})
    trainer = Trainer(cfg)
    train = trainer.train_split
    print(f"{train.num_persons} training persons, {len(train)} images; "
          f"{trainer.splits['query'].num_persons} test persons")

    before = evaluate(trainer.model, trainer.splits, trainer.schema, protocol_filter=cfg.eval_protocol_filter)
    def progress(tr, row):
        if row["iteration"] % 200 == 0:
            print(f"  it {row['iteration']:5d}  loss {row['total']:.3f}  sem {row['sem']:.3f}")

    trainer.run(callback=progress)
    after = evaluate(trainer.model, trainer.splits, trainer.schema, protocol_filter=cfg.eval_protocol_filter)

    print("\nat initialisation\n" + before.summary())
    print("\nafter training\n" + after.summary())
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    path = trainer.save(out / "checkpoint.pt")
    print(f"\ncheckpoint: {path}")


if __name__ == "__main__":
    main()
