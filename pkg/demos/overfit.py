"""Train the desk-sized network on a handful of synthetic images and watch it fit.

    python demos/overfit.py --steps 400 --out /tmp/overfit

Prints the validation curve, then per-image scores, and writes a side-by-side
png (image | ground truth | prediction) for each image plus ``model.ckpt``.
"""

import argparse
import time
import warnings
from pathlib import Path

import numpy as np
from PIL import Image

from mildnet import checkpoint
from mildnet.data import Dataset, synth_glands
from mildnet.evaluation import evaluate, postprocess
from mildnet.inference import predict_image
from mildnet.model import AsppDegenerateWarning, MILDNet, ModelConfig
from mildnet.training import TrainConfig, train


def colourise(labels: np.ndarray) -> np.ndarray:
    palette = np.random.default_rng(0).integers(60, 256, (int(labels.max()) + 1, 3)).astype(np.uint8)
    palette[0] = 0
    return palette[labels]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--images", type=int, default=8)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--steps", type=int, default=400)
    ap.add_argument("--lr", type=float, default=1e-4)
    ap.add_argument("--variant", choices=["standard", "plus"], default="standard")
    ap.add_argument("--out", type=Path, default=Path("overfit-demo"))
    args = ap.parse_args()
    warnings.simplefilter("ignore", AsppDegenerateWarning)

    samples = synth_glands(args.images, args.size, seed=10)
    model = MILDNet(ModelConfig(input_size=args.size, variant=args.variant), seed=0)
    cfg = TrainConfig(learning_rate=args.lr, max_steps=args.steps, max_epochs=10_000, val_fraction=0.0, val_every=10)

    t0 = time.perf_counter()
    result = train(model, Dataset(samples, list(range(len(samples))), []), cfg)
    print(f"{result.step} steps in {time.perf_counter() - t0:.0f} s, best validation score {result.best_dice:.3f}")
    for rec in result.records:
        if rec["kind"] == "val":
            print(f"  step {rec['step']:5d}  dice {rec['val_dice']:.3f}  f1 {rec['val_f1']:.3f}")

    args.out.mkdir(parents=True, exist_ok=True)
    for s in samples:
        pred = postprocess(predict_image(result.model, s.image)["gland"][1])
        rep = evaluate(pred, s.labels, s.name)
        print(f"{s.name}: F1 {rep.f1:.3f}  Dice {rep.object_dice:.3f}  Hausdorff {rep.object_hausdorff:.2f}")
        strip = np.concatenate([s.image, colourise(s.labels), colourise(pred)], axis=1)
        Image.fromarray(strip).save(args.out / f"{s.name}.png")
    checkpoint.save_model(args.out / "model.ckpt", result.model)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
