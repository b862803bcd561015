"""Held-out PSNR/SAM for every ablation row on one bundled scene.

Rows are cumulative, from the full model down to the unconstrained base.  The
base row's raw linear weights only approximate an "unmix only" model.

    python scripts/ablation_table.py --scene specular --iterations 500
"""

import argparse
import os
from dataclasses import replace

import numpy as np

from specfield import metrics, scenegen, segmenter, trainer


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scene", default="specular")
    ap.add_argument("--iterations", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    args = ap.parse_args()

    spec = scenegen.read_scene(scenegen.bundled_scene_path(args.scene))
    gt, labels = scenegen.build_scene(spec)
    train = scenegen.dataset_from_field(gt, spec, labels)
    test = scenegen.dataset_from_field(gt, spec, labels, "test")
    cfg = replace(trainer.TrainConfig(), **{**trainer.PRESETS["desk"], "iterations": args.iterations,
                                            "seed": args.seed, "threads": args.threads, "log_every": 0})

    print(f"{'row':<10} {'psnr':>7} {'sam_fg':>7}")
    for name, row in trainer.ablation_toggles(cfg).items():
        fld = trainer.train(train, row, K=spec.endmembers).field
        psnr, sam = [], []
        for cam, img, lab in zip(test.cameras, test.images, test.labels):
            pred = scenegen.render_view(fld, cam, test.near, test.far, test.n_samples)
            psnr.append(metrics.psnr(pred, img))
            sam.append(metrics.sam(pred, img, mask=lab != segmenter.SENTINEL))
        print(f"{name:<10} {np.mean(psnr):7.2f} {np.mean(sam):7.4f}", flush=True)


if __name__ == "__main__":
    main()
