"""Operator entry points.

Subcommands: simulate, train, restore, eval, ablate, generate. Every command
resolves its configuration first (unknown keys abort before anything is
written), echoes the resolved config into its output directory, and exits
with 0 on success, 2 on config/contract errors, 3 on runtime/numerical
errors.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import checkpoint as ckpt
from .data import DatasetManifest, build_dataset, load_image, save_image
from .errors import (
    BuildError,
    ConfigError,
    ContractError,
    GateFailure,
    NumericalError,
    ParameterError,
    ShapeError,
    TrajectoryError,
)
from .metrics import (
    RandomConvFeatures,
    extract_features,
    fit_stats,
    frechet_distance,
    kid,
    mae_normed,
    ssim,
    to_unit_range,
    write_eval_report,
)
from .model import Variant
from .runconfig import load_config
from .sampler import SampleConfig, SolverKind, generate_batch, sample
from .training import fit

IMAGE_SUFFIXES = (".npy", ".png")


def _overrides(args):
    out = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _config(args, extra=None):
    overrides = _overrides(args)
    overrides.update(extra or {})
    return load_config(args.config, overrides)


def _image_files(directory):
    directory = Path(directory)
    files = sorted(directory.glob("*.npy"))
    if not files:
        files = sorted(p for p in directory.glob("*.png"))
    return files


def _to_u8(image):
    return (np.clip((np.asarray(image) + 1.0) / 2.0, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def _save_grid(path, rows):
    """Tile rows of [-1, 1] images into one preview PNG with separators."""
    sep = 2
    tiles = []
    for row in rows:
        cells = [_to_u8(im) for im in row]
        h = cells[0].shape[0]
        spacer = np.full((h, sep), 255, dtype=np.uint8)
        strip = cells[0]
        for cell in cells[1:]:
            strip = np.concatenate([strip, spacer, cell], axis=1)
        tiles.append(strip)
    w = tiles[0].shape[1]
    spacer = np.full((sep, w), 255, dtype=np.uint8)
    grid = tiles[0]
    for tile in tiles[1:]:
        grid = np.concatenate([grid, spacer, tile], axis=0)
    Image.fromarray(grid).save(path)


def cmd_simulate(args):
    cfg = _config(args)
    out_dir = Path(args.out or Path(args.workdir) / "dataset")
    source_dir = cfg["data.source_dir"]
    if source_dir:
        sources = [p for p in sorted(Path(source_dir).iterdir()) if p.suffix in IMAGE_SUFFIXES]
    else:
        sources = cfg["data.phantom_count"]
    manifest = build_dataset(
        sources,
        cfg.gate_spec(),
        cfg.preprocess_spec(),
        out_dir,
        split_fractions=cfg.split_fractions(),
        seed=cfg["data.seed"],
        pairs_per_clean=cfg["data.pairs_per_clean"],
        failure_tolerance=cfg["data.failure_tolerance"],
        dmax=cfg["motion.dmax_pixels"],
        theta_max=cfg["motion.theta_max_rad"],
    )
    cfg.echo(out_dir)
    counts = {s: len(manifest.records_for(s)) for s in ("train", "val", "test")}
    print(f"dataset written to {out_dir} ({counts})")
    return 0


def cmd_train(args):
    extra = {}
    if args.variant:
        extra["model.variant"] = args.variant
    if args.epochs is not None:
        extra["train.epochs"] = str(args.epochs)
    if args.seed is not None:
        extra["train.seed"] = str(args.seed)
    cfg = _config(args, extra)
    manifest = DatasetManifest.load(args.data)
    variant = cfg["model.variant"]
    out_dir = Path(args.out or Path(args.workdir) / f"run_{variant.value}")
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.echo(out_dir)
    path = fit(manifest, cfg.model_config(), cfg.train_config(), cfg.codec(), out_dir)
    print(f"checkpoint written to {path}")
    return 0


def _load_checkpoint(path):
    path = Path(path)
    if path.is_dir():
        path = path / "model.ckpt"
    return ckpt.load_model(path)


def _restore_sources(input_dir):
    """Corrupted sources from a dataset dir (test split) or a plain image dir."""
    input_dir = Path(input_dir)
    if (input_dir / "manifest.jsonl").exists():
        manifest = DatasetManifest.load(input_dir)
        records = manifest.records_for("test") or manifest.records
        out = []
        for rec in records:
            stem = Path(rec.corrupted_path).stem
            out.append((stem, np.load(manifest.resolve(rec.corrupted_path)), rec.clean_path))
        return out, input_dir
    files = _image_files(input_dir)
    if not files:
        raise BuildError(f"no images found in {input_dir}")
    return [(p.stem, load_image(p), None) for p in files], None


def cmd_restore(args):
    extra = {
        "sample.steps": str(args.steps),
        "sample.guidance": str(args.guidance),
        "sample.solver": args.solver,
        "sample.seed": str(args.seed),
    }
    cfg = _config(args, extra)
    model, model_config, _ = _load_checkpoint(args.checkpoint)
    codec = cfg.codec()
    sources, dataset_root = _restore_sources(args.input)
    out_dir = Path(args.out or Path(args.workdir) / "restored")
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.echo(out_dir)

    sample_config = cfg.sample_config()
    pairing = []
    for i, (stem, source, clean_rel) in enumerate(sources):
        item_config = SampleConfig(
            steps=sample_config.steps,
            guidance=sample_config.guidance,
            solver=sample_config.solver,
            seed=sample_config.seed + i,
        )
        restored = sample(model, source, item_config, model_config, codec)
        save_image(out_dir / stem, restored)
        entry = {"output": f"{stem}.npy", "index": i}
        if clean_rel is not None and dataset_root is not None:
            entry["clean"] = str((dataset_root / clean_rel).resolve())
        pairing.append(entry)
    with (out_dir / "sources.jsonl").open("w") as fh:
        for entry in pairing:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    print(f"{len(sources)} images restored to {out_dir}")
    return 0


def _paired_files(restored_dir, reference_dir):
    restored_dir, reference_dir = Path(restored_dir), Path(reference_dir)
    sources = restored_dir / "sources.jsonl"
    if sources.exists() and restored_dir.resolve() != reference_dir.resolve():
        pairs = []
        for line in sources.read_text().splitlines():
            entry = json.loads(line)
            if "clean" in entry:
                pairs.append((restored_dir / entry["output"], Path(entry["clean"])))
        if pairs:
            return pairs
    a = _image_files(restored_dir)
    b = _image_files(reference_dir)
    if len(a) != len(b):
        raise BuildError(
            f"paired eval needs equally many images, got {len(a)} vs {len(b)}"
        )
    return list(zip(a, b))


def cmd_eval(args):
    cfg = _config(args)
    out_dir = Path(args.out or Path(args.restored) / f"eval_{args.mode}")
    spec = cfg.ssim_spec()
    fingerprint = (
        f"ssim(window={spec.window_size},sigma={spec.window_sigma}),"
        f"features(dim={cfg['metrics.feature_dim']},seed={cfg['metrics.feature_seed']})"
    )
    if args.mode == "paired":
        pairs = _paired_files(args.restored, args.reference)
        ssims, maes = [], []
        for restored_path, reference_path in pairs:
            a = load_image(restored_path)
            b = load_image(reference_path)
            ssims.append(ssim(to_unit_range(a, (-1, 1)), to_unit_range(b, (-1, 1)), spec))
            maes.append(mae_normed(a, b))
        entries = [
            {"name": "SSIM", "value": float(np.mean(ssims))},
            {"name": "MAE", "value": float(np.mean(maes))},
            {"name": "pairs", "value": float(len(pairs))},
        ]
    else:
        restored = [load_image(p) for p in _image_files(args.restored)]
        reference = [load_image(p) for p in _image_files(args.reference)]
        if not restored or not reference:
            raise BuildError("distribution eval needs non-empty image directories")
        extractor = RandomConvFeatures(
            dim=cfg["metrics.feature_dim"], seed=cfg["metrics.feature_seed"]
        )
        fa = extract_features(restored, extractor)
        fb = extract_features(reference, extractor)
        fid = frechet_distance(fit_stats(fa), fit_stats(fb))
        subset = cfg["metrics.kid_subset_size"] or None
        kid_mean, kid_std = kid(
            fa, fb, subset_size=subset, n_subsets=cfg["metrics.kid_subsets"],
            rng=cfg["metrics.feature_seed"],
        )
        entries = [
            {"name": "FID", "value": fid},
            {"name": "KID", "value": kid_mean, "std": kid_std},
        ]
    report = write_eval_report(out_dir, args.mode, entries, fingerprint)
    cfg.echo(out_dir)
    print((out_dir / "report.txt").read_text().rstrip())
    print(f"report written to {report}")
    return 0


def _mean_metrics(restored_list, clean_list):
    ssims = [
        ssim(to_unit_range(r, (-1, 1)), to_unit_range(c, (-1, 1)))
        for r, c in zip(restored_list, clean_list)
    ]
    maes = [mae_normed(r, c) for r, c in zip(restored_list, clean_list)]
    return float(np.mean(ssims)), float(np.mean(maes))


def cmd_ablate(args):
    cfg = _config(args)
    model, model_config, _ = _load_checkpoint(args.checkpoint)
    codec = cfg.codec()
    sources, dataset_root = _restore_sources(args.input)
    if dataset_root is None:
        raise BuildError("ablate needs a dataset directory with a manifest for clean references")
    sources = sources[: args.limit]
    cleans = [np.load(dataset_root / clean_rel) for _, _, clean_rel in sources]
    out_dir = Path(args.out or Path(args.workdir) / "ablation")
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.echo(out_dir)

    steps_list = [int(s) for s in args.steps_list.split(",")]
    guidance_list = [float(g) for g in args.guidance_list.split(",")]
    seed = cfg["sample.seed"]

    table = []
    # steps sweep at guidance 1.0
    rows = [[src] for _, src, _ in sources]
    for steps in steps_list:
        restored = []
        for i, (_, src, _) in enumerate(sources):
            c = SampleConfig(steps=steps, guidance=1.0, solver=cfg["sample.solver"], seed=seed + i)
            restored.append(sample(model, src, c, model_config, codec))
        for row, im in zip(rows, restored):
            row.append(im)
        mean_ssim, mean_mae = _mean_metrics(restored, cleans)
        table.append({"sweep": "steps", "steps": steps, "guidance": 1.0,
                      "ssim": mean_ssim, "mae": mean_mae})
    _save_grid(out_dir / "grid_steps.png", rows)

    # guidance sweep at 5 steps
    rows = [[src] for _, src, _ in sources]
    for guidance in guidance_list:
        restored = []
        for i, (_, src, _) in enumerate(sources):
            c = SampleConfig(steps=5, guidance=guidance, solver=cfg["sample.solver"], seed=seed + i)
            restored.append(sample(model, src, c, model_config, codec))
        for row, im in zip(rows, restored):
            row.append(im)
        mean_ssim, mean_mae = _mean_metrics(restored, cleans)
        table.append({"sweep": "guidance", "steps": 5, "guidance": guidance,
                      "ssim": mean_ssim, "mae": mean_mae})
    _save_grid(out_dir / "grid_guidance.png", rows)

    if args.generation_grid:
        if model_config.variant == Variant.PRIMARY:
            print(
                "warning: guidance-0 generation with a PRIMARY checkpoint is expected "
                "to fail qualitatively (control cannot be dropped)",
                file=sys.stderr,
            )
        rows = None
        for steps in steps_list:
            c = SampleConfig(steps=steps, guidance=0.0, solver=cfg["sample.solver"], seed=seed)
            images = generate_batch(model, min(args.limit, 4), c, model_config, codec)
            if rows is None:
                rows = [[im] for im in images]
            else:
                for row, im in zip(rows, images):
                    row.append(im)
        _save_grid(out_dir / "grid_generate_g0.png", rows)

    lines = [f"{'sweep':<10} {'steps':>5} {'guidance':>8} {'SSIM':>8} {'MAE':>8}"]
    for row in table:
        lines.append(
            f"{row['sweep']:<10} {row['steps']:>5d} {row['guidance']:>8.2f} "
            f"{row['ssim']:>8.4f} {row['mae']:>8.4f}"
        )
    (out_dir / "ablation.txt").write_text("\n".join(lines) + "\n")
    (out_dir / "ablation.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    print("\n".join(lines))
    print(f"ablation written to {out_dir}")
    return 0


def cmd_generate(args):
    extra = {
        "sample.steps": str(args.steps),
        "sample.guidance": str(args.guidance),
        "sample.seed": str(args.seed),
    }
    cfg = _config(args, extra)
    if args.count < 1:
        raise ParameterError(f"count must be >= 1, got {args.count}")
    model, model_config, _ = _load_checkpoint(args.checkpoint)
    codec = cfg.codec()
    if model_config.variant == Variant.PRIMARY:
        print(
            "warning: unconditional generation with a PRIMARY checkpoint is expected "
            "to fail qualitatively (the control pathway cannot be dropped; a zero "
            "source is substituted)",
            file=sys.stderr,
        )
    out_dir = Path(args.out or Path(args.workdir) / "generated")
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.echo(out_dir)
    images = generate_batch(model, args.count, cfg.sample_config(), model_config, codec)
    for i, image in enumerate(images):
        save_image(out_dir / f"gen_{i:04d}", image)
    print(f"{len(images)} images written to {out_dir}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="flowi2i",
        description="Text-free image-conditioned flow matching: simulate, train, restore, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None, help="flat key=value config file")
        p.add_argument("--workdir", type=Path, default=Path("."), help="root for default outputs")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override any config key (repeatable)")
        p.add_argument("--out", type=Path, default=None, help="output directory")

    p = sub.add_parser("simulate", help="build a gated paired dataset")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a velocity model on a dataset")
    common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--variant", choices=[v.value for v in Variant], default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("restore", help="restore corrupted images with a checkpoint")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True, help="dataset dir or image dir")
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--guidance", type=float, default=1.0)
    p.add_argument("--solver", choices=[s.value for s in SolverKind], default="euler")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("eval", help="evaluate restored images")
    common(p)
    p.add_argument("--restored", type=Path, required=True)
    p.add_argument("--reference", type=Path, required=True)
    p.add_argument("--mode", choices=["paired", "distribution"], required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep steps and guidance, emit grids and tables")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True, help="dataset directory")
    p.add_argument("--steps-list", default="2,5,10,20,40")
    p.add_argument("--guidance-list", default="1.0,1.1,1.2,1.3,1.4,1.5,1.6,1.7,1.8,1.9")
    p.add_argument("--limit", type=int, default=8, help="images per sweep")
    p.add_argument("--generation-grid", action="store_true",
                   help="also emit a guidance-0 generation grid over the steps list")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("generate", help="draw images without a source")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--guidance", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParameterError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ShapeError, TrajectoryError, GateFailure, BuildError, NumericalError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
