"""Random transformation sampling on images with unlabeled look-alike glands.

    python demos/uncertainty_filtering.py --checkpoint overfit-demo/model.ckpt

Without a checkpoint a model is trained first (32 images, a few minutes).
Each test image carries faint decoy glands that have no ground truth; the
network tends to segment them anyway. The per-instance score tau (mean of the
boundary-removed variance) is usually higher on the decoys, so dropping
instances above a threshold trades a few true glands for many false ones.
"""

import argparse
import warnings

import numpy as np

from mildnet import checkpoint
from mildnet.data import Dataset, synth_glands
from mildnet.evaluation import detection, postprocess
from mildnet.model import AsppDegenerateWarning, MILDNet, ModelConfig
from mildnet.training import TrainConfig, train
from mildnet.uncertainty import SweepItem, instance_uncertainty, rts_predict, uncertainty_sweep


def get_model(path, size):
    if path:
        return checkpoint.load(path).model()
    train_set = synth_glands(32, size, seed=0)
    watch = synth_glands(4, size, seed=3)
    ds = Dataset(train_set + watch, list(range(32)), list(range(32, 36)))
    cfg = TrainConfig(max_steps=600, max_epochs=10_000, val_every=4, target_dice=0.95)
    return train(MILDNet(ModelConfig(input_size=size), seed=0), ds, cfg).model


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--checkpoint")
    ap.add_argument("--images", type=int, default=16)
    ap.add_argument("--ambiguous", type=int, default=2)
    ap.add_argument("--n", type=int, default=8, help="transformations per image")
    args = ap.parse_args()
    warnings.simplefilter("ignore", AsppDegenerateWarning)

    size = 64
    model = get_model(args.checkpoint, size)
    test = synth_glands(args.images, size, seed=2, ambiguous=args.ambiguous)

    items = []
    tp_tau, fp_tau = [], []
    for i, s in enumerate(test):
        um = rts_predict(model, s.image, n=args.n, seed=[0, i])
        inst = postprocess(um.mu["gland"][1])
        tau = instance_uncertainty(um.gland_sigma_hat, inst)
        matched = {m[0] for m in detection(inst, s.labels).matches}
        for k, v in tau.items():
            (tp_tau if k in matched else fp_tau).append(v)
        items.append(SweepItem(inst, s.labels, {"sigma_hat": tau}))

    if not tp_tau + fp_tau:
        print("the model found no glands; train it longer")
        return
    for label, taus in (("true-positive", tp_tau), ("false-positive", fp_tau)):
        median = f"{np.median(taus):.4f}" if taus else "-"
        print(f"{label} instances: {len(taus):3d}  median tau {median}")

    taus = sorted(set(tp_tau + fp_tau))
    thresholds = list(np.quantile(taus, np.linspace(0.3, 1.0, 8))) + [taus[-1] * 2 + 1]
    print("\nthreshold     F1   retained   tp  fp  fn")
    for rec in uncertainty_sweep(items, thresholds, ["sigma_hat"]):
        print(f"{rec.threshold:9.5f}  {rec.f1:.3f}   {rec.retained_fraction:6.3f}  {rec.tp:3d} {rec.fp:3d} {rec.fn:3d}")


if __name__ == "__main__":
    main()
