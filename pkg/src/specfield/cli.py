"""specfield: hyperspectral radiance fields with spectral unmixing.

Exit codes: 0 ok, 2 user/config error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import gradcheck, hsio, metrics, scenegen, segmenter, trainer
from .field import replace_endmember
from .renderer import render_image
from .speccore import default_camera_response, spectrum_to_rgb

EXIT_OK, EXIT_USER, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class NumericFailure(RuntimeError):
    pass


def default_threads() -> int:
    env = os.environ.get("SPECFIELD_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def print_resolved(args, extra: str = ""):
    skip = {"func"}
    lines = [f"{k} = {v}" for k, v in sorted(vars(args).items()) if k not in skip]
    print("# resolved configuration")
    print("\n".join(lines))
    if extra:
        print(extra, end="")
    sys.stdout.flush()


# --- subcommands -------------------------------------------------------------

def cmd_synth(args):
    path = Path(args.spec)
    if not path.exists() and "/" not in args.spec:
        path = scenegen.bundled_scene_path(args.spec)
    text = path.read_text()
    spec = scenegen.parse_scene(text, str(path))
    if args.seed is not None:
        spec.seed = args.seed
    print_resolved(args)
    fld, labels = scenegen.build_scene(spec)
    out = scenegen.emit_dataset(fld, labels, spec, args.out, scene_text=text)
    print(f"wrote {spec.n_train} train and {spec.n_test} test views to {out}")


def cmd_init_endmembers(args):
    ds = scenegen.load_dataset(args.data, "train")
    cfg = replace(trainer.TrainConfig(), seed=args.seed, vca_max_pixels=args.max_pixels)
    print_resolved(args)
    E = trainer.init_endmembers(ds, cfg, args.k)
    hsio.write_matrix(E, args.out)
    print(f"wrote {E.shape[0]}x{E.shape[1]} endmembers to {args.out}")


def resolve_train_config(args) -> trainer.TrainConfig:
    cfg = trainer.TrainConfig()
    if args.preset:
        if args.preset not in trainer.PRESETS:
            raise ValueError(f"unknown preset {args.preset!r}; choose from {sorted(trainer.PRESETS)}")
        cfg = replace(cfg, **trainer.PRESETS[args.preset])
    if args.config:
        cfg = trainer.read_config(args.config, cfg)
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for flag, key in (("iterations", "iterations"), ("seed", "seed"), ("lr", "learning_rate"),
                      ("rays_per_batch", "rays_per_batch"), ("n_samples", "n_samples")):
        val = getattr(args, flag)
        if val is not None:
            overrides[key] = str(val)
    overrides["threads"] = str(args.threads)
    overrides["deterministic"] = "on" if args.deterministic else "off"
    cfg = trainer.apply_overrides(cfg, overrides, "command line")
    if args.ablation:
        cfg = trainer.apply_ablation(cfg, args.ablation)
    return cfg.validate()


def cmd_train(args):
    cfg = resolve_train_config(args)
    print_resolved(args, trainer.format_config(cfg))
    entries, _ = hsio.read_manifest(Path(args.data) / "manifest.txt")
    K = args.k or int(entries["endmembers"])
    ds = scenegen.load_dataset(args.data, "train", verify=False)
    field, adam_state, start = None, None, 0
    if args.resume:
        field = hsio.read_field(args.resume)
        adam_path = Path(str(args.resume) + ".adam.npz")
        if adam_path.exists():
            adam_state = trainer.load_adam(adam_path)
            start = int(adam_state["iteration"])
    try:
        result = trainer.train(ds, cfg, field=field, K=K, adam_state=adam_state, start_iteration=start)
    except trainer.TrainingDiverged as exc:
        raise NumericFailure(str(exc)) from exc
    hsio.write_field(result.field, args.out)
    history = args.history or str(args.out) + ".loss.txt"
    trainer.write_history(result.history, history)
    if args.save_adam:
        trainer.save_adam(result, str(args.out) + ".adam.npz")
    last = result.history[-1][1] if result.history else float("nan")
    print(f"trained {len(result.history)} iterations, final loss {last:.6g}; checkpoint {args.out}")


def _frames(args):
    poses = hsio.read_poses(args.poses)
    return poses, poses.cameras()


def cmd_render(args):
    print_resolved(args)
    fld = hsio.read_field(args.ckpt)
    poses, cams = _frames(args)
    resp = default_camera_response(fld.bands, tuple(args.wavelength_range))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for (rel, _), cam in zip(poses.frames, cams):
        stem = Path(rel).stem
        r = render_image(fld, cam, poses.near, poses.far, args.n_samples, response=resp)
        hsio.write_cube(hsio.SpectralCube(r.spectral), out / f"{stem}.hsc")
        rgb = spectrum_to_rgb(r.spectral, resp.with_policy("srgb_gamma"))
        hsio.write_ppm(hsio.to_u8(rgb), out / f"{stem}.ppm")
        hsio.write_pgm(hsio.to_u8(r.opacity), out / f"{stem}_opacity.pgm")
        for k in range(fld.n_endmembers):
            hsio.write_pgm(hsio.to_u8(r.abundance[..., k]), out / f"{stem}_abundance{k}.pgm")
    print(f"rendered {len(cams)} views to {out}")


def cmd_segment(args):
    print_resolved(args)
    fld = hsio.read_field(args.ckpt)
    poses, cams = _frames(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scores = []
    for (rel, _), cam in zip(poses.frames, cams):
        stem = Path(rel).stem
        labels = segmenter.segment_image(fld, cam, poses.near, poses.far, args.n_samples,
                                         args.opacity_threshold, args.use_abundance)
        hsio.write_labels(labels, out / f"{stem}.seg")
        hsio.write_ppm(segmenter.preview(labels), out / f"{stem}_labels.ppm")
        if args.gt_dir:
            gt = hsio.read_labels(Path(args.gt_dir) / f"{stem}.seg")
            scores.append(segmenter.score_segmentation(labels, gt))
    if scores:
        print(f"miou = {np.mean([s['miou'] for s in scores]):.6f}")
        print(f"f1 = {np.mean([s['f1'] for s in scores]):.6f}")
    print(f"segmented {len(cams)} views into {out}")


def cmd_eval(args):
    print_resolved(args)
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    names = sorted(p.name for p in pred_dir.glob("*.hsc") if (gt_dir / p.name).exists())
    if not names:
        raise ValueError(f"no matching .hsc files between {pred_dir} and {gt_dir}")
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    reports = []
    for name in names:
        pred = hsio.read_cube(pred_dir / name).data
        gt = hsio.read_cube(gt_dir / name).data
        mask = None
        seg = (gt_dir / name).with_suffix(".seg")
        if args.foreground_sam and seg.exists():
            mask = hsio.read_labels(seg) != segmenter.SENTINEL
        rep = metrics.evaluate(pred, gt, sam_mask=mask)
        reports.append(rep)
        print(f"{name} {rep.to_record()}")
        if out:
            heat, _ = metrics.mrae_map(pred, gt)
            hsio.write_pgm(hsio.to_u8(heat, 0.0, args.mrae_max), out / f"{Path(name).stem}_mrae.pgm")
    avg = metrics.average_reports(reports)
    print(avg.to_text(), end="")
    print(avg.to_record())
    if out:
        (out / "report.txt").write_text(avg.to_text())
        (out / "report.json").write_text(avg.to_record() + "\n")


def cmd_edit(args):
    print_resolved(args)
    fld = hsio.read_field(args.ckpt)
    spectrum = hsio.read_spectrum(args.spectrum)
    edited = replace_endmember(fld, args.k, spectrum)
    hsio.write_field(edited, args.out)
    print(f"replaced endmember {args.k}; wrote {args.out}")


def cmd_gradcheck(args):
    print_resolved(args)
    errors = gradcheck.run(args.seed, args.n_params, args.eps)
    print(gradcheck.format_table(errors))
    worst = max(float(e.max()) for e in errors.values() if e.size)
    if worst > args.tolerance:
        raise NumericFailure(f"max relative error {worst:.3e} exceeds tolerance {args.tolerance:.1e}")
    print(f"ok: max relative error {worst:.3e} <= {args.tolerance:.1e}")


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $SPECFIELD_THREADS or CPU count)")
    common.add_argument("--deterministic", action="store_true",
                        help="ordered gradient reductions (bitwise reproducible)")

    p = argparse.ArgumentParser(prog="specfield", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--spec", required=True, help="scene spec file, or a bundled name such as 'desk'")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--seed", type=int, default=None, help="override the scene seed")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("init-endmembers", parents=[common], help="VCA endmembers from training views")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--k", type=int, required=True, help="number of endmembers")
    s.add_argument("--out", required=True, help="output matrix file")
    s.add_argument("--seed", type=int, default=0, help="VCA seed")
    s.add_argument("--max-pixels", type=int, default=100000, help="pixel subsample size")
    s.set_defaults(func=cmd_init_endmembers)

    s = sub.add_parser("train", parents=[common], help="fit a field to a dataset")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--out", required=True, help="output UMF1 checkpoint")
    s.add_argument("--config", help="key = value config file")
    s.add_argument("--preset", choices=sorted(trainer.PRESETS), help="named preset applied first")
    s.add_argument("--ablation", help="ablation row (full, vca, rgb, scaling, physical, base) or "
                                      "single toggle (no-specular, no-vca, no-rgb, no-scaling, no-constraint)")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    s.add_argument("--iterations", type=int, help="optimiser steps")
    s.add_argument("--seed", type=int, help="root seed for all random streams")
    s.add_argument("--lr", type=float, help="initial learning rate")
    s.add_argument("--rays-per-batch", type=int, help="rays per step (>= ray count: full batch)")
    s.add_argument("--n-samples", type=int, help="samples per ray")
    s.add_argument("--k", type=int, help="number of endmembers (default: from the manifest)")
    s.add_argument("--resume", help="checkpoint to resume from")
    s.add_argument("--save-adam", action="store_true", help="also save optimiser state")
    s.add_argument("--history", help="loss history path (default: <out>.loss.txt)")
    s.set_defaults(func=cmd_train)

    def add_render_args(s):
        s.add_argument("--ckpt", required=True, help="UMF1 checkpoint")
        s.add_argument("--poses", required=True, help="pose file")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--n-samples", type=int, default=64, help="samples per ray")

    s = sub.add_parser("render", parents=[common], help="render cubes, RGB and abundance maps")
    add_render_args(s)
    s.add_argument("--wavelength-range", type=float, nargs=2, default=[450.0, 650.0],
                   metavar=("LO", "HI"), help="band-centre range in nm for the RGB preview")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("segment", parents=[common], help="cluster-probe material segmentation")
    add_render_args(s)
    s.add_argument("--opacity-threshold", type=float, default=0.5,
                   help="pixels below this opacity are background")
    s.add_argument("--use-abundance", action="store_true", help="argmax of rendered abundances instead")
    s.add_argument("--gt-dir", help="directory of SEG1 ground truth to score against")
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("eval", parents=[common], help="metrics between predicted and reference cubes")
    s.add_argument("--pred", required=True, help="directory of predicted .hsc cubes")
    s.add_argument("--gt", required=True, help="directory of reference .hsc cubes")
    s.add_argument("--out", help="directory for the report and MRAE heatmaps")
    s.add_argument("--mrae-max", type=float, default=1.0, help="MRAE mapped to white in heatmaps")
    s.add_argument("--foreground-sam", action="store_true",
                   help="restrict SAM to pixels labelled in the reference .seg maps")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("edit", parents=[common], help="replace one endmember")
    s.add_argument("--ckpt", required=True, help="UMF1 checkpoint")
    s.add_argument("--k", type=int, required=True, help="endmember index")
    s.add_argument("--spectrum", required=True, help="file with B values in [0, 1]")
    s.add_argument("--out", required=True, help="output checkpoint")
    s.set_defaults(func=cmd_edit)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    s.add_argument("--seed", type=int, default=0, help="problem and parameter-pick seed")
    s.add_argument("--n-params", type=int, default=1000, help="grid parameters to perturb")
    s.add_argument("--eps", type=float, default=1e-3, help="central-difference step")
    s.add_argument("--tolerance", type=float, default=2e-3, help="max allowed relative error")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USER if exc.code else EXIT_OK
    if args.threads is None:
        args.threads = default_threads()
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except NumericFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, IndexError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
