"""Command-line entry point: ``pneumoseg <command> ...``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import ConfigError, apply_config, read_config
from .evaluate import EvaluationError, build_report, write_report
from .network import NetworkConfig, NonFiniteError
from .preprocess import PreprocessError
from .quantify import QuantifyError, quantify, write_quant_csv
from .synthdata import PhantomError, generate_cohort
from .training import (
    CohortCache, FoldSplit, TrainConfig, TrainingError, cross_validate, predict_patient, train_fold,
)
from .volume_io import LabelMask, VolumeFormatError, load_mask, load_volume, read_manifest, save_mask
from .weights import WeightFileError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

DATA_ERRORS = (VolumeFormatError, PreprocessError, QuantifyError, EvaluationError, PhantomError,
               WeightFileError, ConfigError, FileNotFoundError, KeyError)
NUMERIC_ERRORS = (FloatingPointError, NonFiniteError, TrainingError)

log = logging.getLogger("pneumoseg")


class UsageError(Exception):
    pass


def _code_version() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if rev.returncode == 0:
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_run_meta(out_dir: Path, command: str, args, resolved: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "command": command,
        "code_version": _code_version(),
        "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"},
        "resolved_config": resolved,
        "torch": torch.__version__,
    }
    path = out_dir / "run_meta.json"
    path.write_text(json.dumps(meta, indent=2, sort_keys=True, default=str), encoding="utf-8")
    return path


def _configs(args) -> tuple[dict, TrainConfig]:
    values = read_config(args.config) if args.config else {}
    train_cfg = apply_config(TrainConfig(), values, "train")
    overrides = {}
    for name in ("seed", "lr0", "batch_size", "max_epochs", "patch_size", "windows_per_epoch",
                 "val_windows", "loss_kind", "time_limit_s", "model_kind", "image_size"):
        v = getattr(args, name, None)
        if v is not None:
            overrides[name] = v
    train_cfg = apply_config(train_cfg, overrides)
    if train_cfg.model_kind == "convlstm":
        net_cfg = apply_config(NetworkConfig(), values, "network").to_dict()
    else:
        from .baselines import DEFAULT_BASE, UnetConfig
        net_cfg = apply_config(UnetConfig(base=DEFAULT_BASE[train_cfg.model_kind]), values, "network").to_dict()
    return net_cfg, train_cfg


def _progress(fold=None):
    def report(*a):
        if fold is None:
            epoch, tr, va, lr = a
            prefix = ""
        else:
            f, epoch, tr, va, lr = a
            prefix = f"fold {f} "
        print(f"{prefix}epoch {epoch:4d}  train {tr:+.5f}  val {va:+.5f}  lr {lr:.1e}", flush=True)
    return report


def cmd_synth(args) -> int:
    out = Path(args.out)
    ds = generate_cohort(args.n, out, seed=args.seed, high_opacity_prob=args.high_opacity_prob)
    write_run_meta(out, "synth", args, {"n": args.n, "seed": args.seed,
                                         "high_opacity_prob": args.high_opacity_prob})
    print(f"wrote {len(ds)} phantoms and {ds.manifest_path}")
    return EXIT_OK


def _torch_setup(args):
    torch.set_num_threads(max(1, args.workers))
    if getattr(args, "device", "portable") == "accelerated":
        log.warning("accelerated device requested; this build runs on the portable CPU path")
    args.resolved_device = "cpu"


def cmd_train(args) -> int:
    _torch_setup(args)
    net_cfg, cfg = _configs(args)
    ds = read_manifest(args.data)
    ids = list(ds.patient_ids)
    order = [ids[i] for i in np.random.default_rng(cfg.seed).permutation(len(ids))]
    if args.val_size + args.test_size >= len(order):
        raise UsageError("validation + test sizes leave no training cases")
    val = order[:args.val_size]
    test = order[args.val_size:args.val_size + args.test_size]
    split = FoldSplit(0, tuple(order[args.val_size + args.test_size:]), tuple(val), tuple(test))
    out = Path(args.out)
    write_run_meta(out, "train", args, {"network": net_cfg, "train": cfg.to_dict()})
    cache = CohortCache(ds, cfg.image_size)
    from .inference import save_model
    from .plotting import render_history
    model, hist = train_fold(split, cache, net_cfg, cfg, progress=_progress())
    save_model(model, out / "model.weights", {"image_size": cfg.image_size})
    hist.to_csv(out / "history.csv")
    render_history(hist, out / "history.png")
    (out / "split.json").write_text(json.dumps(
        {"train": list(split.train_ids), "val": list(split.val_ids), "test": list(split.test_ids)}, indent=1))
    if test:
        (out / "predictions").mkdir(exist_ok=True)
        for pid in test:
            save_mask(predict_patient(model, cache, pid), out / "predictions" / f"{pid}.mask", patient_id=pid)
    print(f"best epoch {hist.best_epoch}; weights in {out / 'model.weights'}")
    return EXIT_OK


def cmd_crossval(args) -> int:
    _torch_setup(args)
    net_cfg, cfg = _configs(args)
    ds = read_manifest(args.data)
    out = Path(args.out)
    write_run_meta(out, "crossval", args, {"network": net_cfg, "train": cfg.to_dict(),
                                            "k": args.k, "val_size": args.val_size})
    preds, hists, _ = cross_validate(ds, out, net_cfg, cfg, k=args.k, val_size=args.val_size,
                                     progress=_progress(fold=True))
    print(f"predicted {len(preds)} patients with {args.k} models; outputs in {out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    _torch_setup(args)
    from .inference import load_model, segment_volume
    model, meta = load_model(args.weights)
    vol = load_volume(args.volume)
    mask = segment_volume(model, vol, batch_size=args.batch_size, size=int(meta.get("image_size", 256)))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_mask(mask, out, patient_id=vol.patient_id)
    write_run_meta(out.parent, "predict", args, {"model": meta})
    print(f"wrote {out}")
    return EXIT_OK


def _parse_spacing(text: str):
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise UsageError("--spacing takes three comma-separated values dz,dy,dx")
    return tuple(parts)


def cmd_quantify(args) -> int:
    reports = []
    masks = args.mask
    if args.volume and len(args.volume) != len(masks):
        raise UsageError("give one --volume per --mask")
    for k, mask_path in enumerate(masks):
        mask = load_mask(mask_path)
        if args.volume:
            vol = load_volume(args.volume[k])
            spacing, pid = vol.spacing, vol.patient_id
        elif args.spacing:
            spacing, pid = _parse_spacing(args.spacing), Path(mask_path).stem
        else:
            raise UsageError("quantify needs --volume or --spacing for physical units")
        lung = load_mask(args.lung_mask[k], mask.shape).lung if args.lung_mask else None
        if args.lung_mask and lung is None:
            raise QuantifyError(f"{args.lung_mask[k]} carries no lung mask")
        reports.append(quantify(mask, spacing, pid or Path(mask_path).stem, lung=lung))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_quant_csv(reports, out)
    write_run_meta(out.parent, "quantify", args, {})
    print(f"wrote {out}")
    return EXIT_OK


def _collect(dir_or_manifest: Path):
    """Map patient id -> (mask path, volume path or None) from a directory or manifest."""
    p = Path(dir_or_manifest)
    if p.is_file():
        return {pid: (m, v) for pid, v, m in read_manifest(p).records}
    if not p.is_dir():
        raise FileNotFoundError(f"no such directory or manifest: {p}")
    out = {}
    for m in sorted(p.glob("*.mask")):
        v = m.with_suffix(".vol")
        out[m.stem] = (m, v if v.is_file() else None)
    return out


def cmd_evaluate(args) -> int:
    preds, gts = _collect(args.pred), _collect(args.gt)
    if args.subset:
        gts = {pid: v for pid, v in gts.items() if pid in preds}
    if not gts:
        raise EvaluationError(f"no reference masks in {args.gt}")
    pred_masks, gt_masks, spacings = {}, {}, {}
    for pid, (mpath, vpath) in gts.items():
        if pid not in preds:
            raise EvaluationError(f"no prediction for patient {pid}")
        if vpath is None:
            raise EvaluationError(f"no volume (spacing) for patient {pid} in {args.gt}")
        vol = load_volume(vpath)
        gt_masks[pid] = load_mask(mpath, vol.shape)
        pred_masks[pid] = load_mask(preds[pid][0], vol.shape)
        spacings[pid] = vol.spacing
    extra = sorted(set(preds) - set(gts))
    if extra:
        raise EvaluationError(f"predictions without reference: {extra}")
    folds = None
    if args.folds:
        folds = {pid: f["fold"] for f in json.loads(Path(args.folds).read_text()) for pid in f["test"]}
    report = build_report(pred_masks, gt_masks, spacings, folds)
    out = Path(args.out)
    write_report(report, out)
    if not args.no_plots:
        from .plotting import render_report_figures
        render_report_figures(report, out)
    write_run_meta(out, "evaluate", args, {})
    ld = report.lesion_dice["across_patients"]
    sd = "n/a" if ld["sd"] is None else f"{ld['sd']:.3f}"
    print(f"{report.n_patients} patients; lesion DSC {ld['mean']:.3f} +/- {sd}")
    return EXIT_OK


def cmd_bench(args) -> int:
    _torch_setup(args)
    from .bench import ModelSpec, append_bench_json, benchmark
    reports = []
    for kind in args.models.split(","):
        for n in args.n_slices:
            spec = ModelSpec(kind.strip(), seed=args.seed)
            rep = benchmark(spec, n, args.repetitions, args.image_size, args.batch_size,
                            threads=max(1, args.workers))
            reports.append(rep)
            status = rep.error or f"median {rep.median_s:.3f}s  peak {rep.peak_memory_mb:.1f} MB"
            print(f"{rep.model:9s} {n:4d} slices  {status}", flush=True)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    append_bench_json(reports, out)
    write_run_meta(out.parent, "bench", args, {})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pneumoseg", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, training=False):
        p.add_argument("--config", type=Path, help="key=value config file; flags override it")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int, default=1, help="torch intra-op threads")
        p.add_argument("--device", choices=["portable", "accelerated"], default="portable")
        if training:
            p.add_argument("--lr0", type=float)
            p.add_argument("--batch-size", type=int)
            p.add_argument("--max-epochs", type=int)
            p.add_argument("--patch-size", type=int)
            p.add_argument("--windows-per-epoch", type=int)
            p.add_argument("--val-windows", type=int)
            p.add_argument("--loss-kind", choices=["rmi", "ce_dice"])
            p.add_argument("--time-limit-s", type=float)
            p.add_argument("--model-kind", choices=["convlstm", "unet2d", "unet3d"])
            p.add_argument("--image-size", type=int)

    p = sub.add_parser("synth", help="generate a phantom cohort")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--high-opacity-prob", type=float, default=0.5)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a single train/val/test split")
    common(p, training=True)
    p.add_argument("--data", type=Path, required=True, help="manifest.tsv")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--val-size", type=int, default=4)
    p.add_argument("--test-size", type=int, default=4)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("crossval", help="k-fold cross-validation")
    common(p, training=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--val-size", type=int, default=32)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("predict", help="segment one volume")
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--volume", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--device", choices=["portable", "accelerated"], default="portable")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("quantify", help="lesion volumes and burden from mask files")
    p.add_argument("--mask", type=Path, nargs="+", required=True)
    p.add_argument("--volume", type=Path, nargs="+", help="source volumes (spacing, patient id)")
    p.add_argument("--spacing", help="dz,dy,dx in mm when no volume is given")
    p.add_argument("--lung-mask", type=Path, nargs="+", help="mask files carrying lung masks")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_quantify)

    p = sub.add_parser("evaluate", help="agreement statistics, CSV/JSON report and figures")
    p.add_argument("--pred", type=Path, required=True, help="directory of <id>.mask predictions")
    p.add_argument("--gt", type=Path, required=True, help="reference directory or manifest")
    p.add_argument("--folds", type=Path, help="folds.json from crossval")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("--subset", action="store_true",
                   help="evaluate only reference patients that have a prediction")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="inference time and peak memory")
    p.add_argument("--models", default="convlstm,unet2d,unet3d")
    p.add_argument("--n-slices", type=int, nargs="+", default=[16])
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--image-size", type=int, default=256)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--device", choices=["portable", "accelerated"], default="portable")
    p.add_argument("--out", type=Path, default=Path("bench.json"))
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NUMERIC_ERRORS as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
