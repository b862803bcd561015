"""Train the desk preset on a bundled synthetic scene and score it against ground truth.

    python scripts/desk_recovery.py                  # desk scene, preset config
    python scripts/desk_recovery.py --scene two_material --set iterations=500
"""

import argparse
import logging
import os
import time
from dataclasses import replace

import numpy as np

from specfield import metrics, scenegen, segmenter, trainer
from specfield.unmix2d import match_endmembers


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scene", default="desk")
    ap.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    spec = scenegen.read_scene(scenegen.bundled_scene_path(args.scene))
    gt, labels = scenegen.build_scene(spec)
    train = scenegen.dataset_from_field(gt, spec, labels)
    test = scenegen.dataset_from_field(gt, spec, labels, "test")
    cfg = replace(trainer.TrainConfig(), **trainer.PRESETS["desk"], threads=args.threads)
    cfg = trainer.apply_overrides(cfg, dict(s.split("=", 1) for s in args.set))

    t0 = time.perf_counter()
    res = trainer.train(train, cfg, K=spec.endmembers)
    print(f"trained {cfg.iterations} iterations in {time.perf_counter() - t0:.0f} s")
    _, ang = match_endmembers(res.field.endmembers, gt.endmembers)
    print("endmember angles (rad):", np.array2string(ang, precision=4))

    print(f"{'view':>4} {'psnr':>7} {'sam_fg':>7} {'rmse':>7} {'miou':>6}")
    for i, (cam, img, lab) in enumerate(zip(test.cameras, test.images, test.labels)):
        pred = scenegen.render_view(res.field, cam, test.near, test.far, test.n_samples)
        seg = segmenter.segment_image(res.field, cam, test.near, test.far, test.n_samples)
        print(f"{i:>4} {metrics.psnr(pred, img):7.2f} {metrics.sam(pred, img, mask=lab != segmenter.SENTINEL):7.4f} "
              f"{metrics.rmse(pred, img):7.4f} {segmenter.score_segmentation(seg, lab)['miou']:6.3f}")


if __name__ == "__main__":
    main()
