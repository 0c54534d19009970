"""Show where the alignment crop lands on vertically shifted renders.

Trains a short model on renders with vertical jitter, then writes a contact sheet in which every
image is paired with its channel-norm heat map. Rows outside the crop are dimmed.

    python demos/alignment_heatmaps.py --iterations 600 --output runs/heatmaps.png
"""

import argparse
from pathlib import Path

import numpy as np
from PIL import Image

from sidreid.config import desk_config
from sidreid.workbench import Trainer, extract


def tile(image: np.ndarray, heat: np.ndarray, top: int, bottom: int) -> np.ndarray:
    h, w = image.shape[:2]
    rows = heat.shape[0]
    norm = (heat - heat.min()) / max(np.ptp(heat), 1e-8)
    big = np.asarray(Image.fromarray((norm * 255).astype(np.uint8)).resize((w, h), Image.NEAREST))
    heat_rgb = np.stack([big, big // 3, 255 - big], -1).astype(np.uint8)
    keep = np.zeros(h, bool)
    keep[top * h // rows:(bottom + 1) * h // rows] = True
    shaded = image.copy()
    shaded[~keep] //= 3
    return np.concatenate([shaded, heat_rgb], 1)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iterations", type=int, default=600)
    ap.add_argument("--jitter", type=float, default=0.3)
    ap.add_argument("--count", type=int, default=12)
    ap.add_argument("--output", default="runs/heatmaps.png")
    args = ap.parse_args()

    cfg = desk_config(**{"log_every": 0, "data.synthetic.vertical_jitter": args.jitter,
                         "optim.iterations": args.iterations,
                         "optim.warmup_iterations": max(1, args.iterations // 10)})
    trainer = Trainer(cfg)
    trainer.run()
    gallery = trainer.splits["gallery"]
    _, heat, bounds = extract(trainer.model, gallery, with_heat=True)

    n = min(args.count, len(gallery))
    images = gallery.load_images(range(n))
    if images.dtype != np.uint8:
        images = (np.clip(images, 0, 1) * 255).astype(np.uint8)
    sheet = np.concatenate([tile(images[i], heat[i], *bounds[i]) for i in range(n)], 1)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(sheet).save(out)
    spans = bounds[:, 1] - bounds[:, 0] + 1
    print(f"sigma {cfg.model.sigma}: kept {spans.mean():.2f} of {heat.shape[1]} rows on average; "
          f"{int((spans < heat.shape[1]).sum())}/{len(spans)} gallery images cropped")
    print(f"contact sheet: {out}")


if __name__ == "__main__":
    main()
