"""Command-line entry point: ``cxrtrunc {synth,train,eval,analyze,cam}``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.

Configuration precedence is built-in defaults < ``--config`` JSON file <
explicit flags. ``train`` persists the merged configuration in the run
directory as ``experiment.json`` so that the run can be reproduced from it.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import CxrTruncError, InputError, NotFoundError

log = logging.getLogger("cxrtrunc")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

TRAIN_DEFAULTS = {
    "data": None,
    "train_manifest": None,
    "valid_manifest": None,
    "family": "toy",
    "variant": None,
    "k": 0,
    "pretrained": False,
    "weights": None,
    "weights_config": None,
    "synthetic_weights": False,
    "image_size": 64,
    "normalization": None,
    "stats_sample_cap": None,
    "learning_rate": 1e-4,
    "batch_size": 16,
    "epochs": 3,
    "eval_every": 8192,
    "ensemble_size": 10,
    "label_policy": "uncertain_as_negative",
    "seed": 0,
    "deterministic": True,
    "workers": 1,
}
EVAL_DEFAULTS = {"split": "test", "manifest": None, "replicates": 1000, "seed": 0, "out": None}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _bool(text: str) -> bool:
    v = str(text).strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def merge_config(defaults: dict, args: argparse.Namespace) -> dict:
    """defaults < config file < flags that were given explicitly."""
    merged = dict(defaults)
    path = getattr(args, "config", None)
    if path:
        payload = json.loads(Path(path).read_text())
        if not isinstance(payload, dict):
            raise InputError(f"{path}: config must be a flat JSON object")
        unknown = sorted(set(payload) - set(defaults))
        if unknown:
            raise InputError(f"{path}: unknown config key(s): {', '.join(unknown)}")
        merged.update(payload)
    merged.update({k: v for k, v in vars(args).items() if k in defaults})
    return merged


# -- synth ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    from .synth import SynthConfig, make_synthetic_dataset

    config = SynthConfig(args.n, args.size, args.tasks, args.seed, args.positive_rate, args.uncertain_rate)
    manifests = make_synthetic_dataset(config, args.out)
    for split, path in manifests.items():
        print(f"{split}: {path}")
    return EXIT_OK


# -- train ---------------------------------------------------------------------------


def _manifests(cfg: dict) -> tuple[Path, Path]:
    train = cfg["train_manifest"] or (cfg["data"] and Path(cfg["data"]) / "train.csv")
    valid = cfg["valid_manifest"] or (cfg["data"] and Path(cfg["data"]) / "valid.csv")
    if not train or not valid:
        raise InputError("pass --data DIR or both --train-manifest and --valid-manifest")
    for p in (train, valid):
        if not Path(p).exists():
            raise NotFoundError(f"manifest {p} does not exist")
    return Path(train), Path(valid)


def best_checkpoint(run_dir: Path) -> Path:
    from .trainer import load_checkpoints, select_top

    return Path(select_top(load_checkpoints(run_dir), 1)[0].artifact_path)


def make_provider(cfg: dict):
    from .providers import CheckpointProvider, SyntheticPretrainedProvider

    if cfg["synthetic_weights"]:
        return SyntheticPretrainedProvider(cfg["seed"])
    override = cfg["weights"]
    if override and Path(override).is_dir():
        override = str(best_checkpoint(Path(override)))
    if cfg["weights_config"]:
        return CheckpointProvider.from_config(cfg["weights_config"], override=override)
    return CheckpointProvider(override=override)


def cmd_train(args) -> int:
    from .data import ImageDataset, compute_dataset_stats, load_manifest, select_normalization
    from .registry import get_spec
    from .trainer import TrainConfig, build_ensemble, finetune
    from .truncation import truncate

    cfg = merge_config(TRAIN_DEFAULTS, args)
    spec = get_spec(cfg["family"], cfg["variant"])
    plan = truncate(spec, cfg["k"])
    train_path, valid_path = _manifests(cfg)
    train_records, valid_records = load_manifest(train_path), load_manifest(valid_path)

    mode = cfg["normalization"] or ("imagenet_stats" if cfg["pretrained"] else "dataset_stats")
    stats = None
    if mode == "dataset_stats":
        stats = compute_dataset_stats(train_records, cfg["stats_sample_cap"], cfg["seed"], cfg["image_size"])
    norm = select_normalization(cfg["pretrained"], stats, mode)

    def dataset(records):
        return ImageDataset(records, cfg["image_size"], norm, cfg["label_policy"], cfg["workers"])

    tc = TrainConfig.from_dict(cfg)
    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    persisted = dict(cfg, variant=spec.variant, train_manifest=str(train_path.resolve()),
                     valid_manifest=str(valid_path.resolve()),
                     data=str(Path(cfg["data"]).resolve()) if cfg["data"] else None)
    (run_dir / "experiment.json").write_text(json.dumps(persisted, indent=2) + "\n")

    provider = make_provider(cfg) if cfg["pretrained"] else None
    result = finetune(plan, tc, dataset(train_records), dataset(valid_records), run_dir,
                      pretrained=cfg["pretrained"], provider=provider)
    ensemble = build_ensemble(run_dir, tc.ensemble_size)
    best = ensemble.members[0]
    print(f"{plan.name}: {result.total_steps} steps, {len(result.checkpoints)} checkpoint(s), "
          f"best validation avg AUC {best.avg_auc:.4f} at step {best.step}")
    print(f"run directory: {run_dir}")
    return EXIT_OK


# -- eval ----------------------------------------------------------------------------


def _load_run(run_dir: Path):
    from .trainer import run_metadata

    if not run_dir.is_dir():
        raise NotFoundError(f"run directory {run_dir} does not exist")
    meta = run_metadata(run_dir)
    exp_path = run_dir / "experiment.json"
    exp = json.loads(exp_path.read_text()) if exp_path.exists() else {}
    return meta, exp


def _ensemble(run_dir: Path, k: int | None = None):
    from .trainer import CheckpointMeta, EnsembleModel, build_ensemble, load_checkpoints
    from .truncation import TruncationPlan

    ens_path = run_dir / "ensemble.json"
    if k is None and ens_path.exists():
        payload = json.loads(ens_path.read_text())
        members = [CheckpointMeta(**m) for m in payload["members"]]
        return EnsembleModel(members, TruncationPlan.load(run_dir / "plan.json"))
    load_checkpoints(run_dir)
    return build_ensemble(run_dir, k or 10)


def _eval_dataset(run_dir: Path, split: str, manifest: str | None):
    from .data import ImageDataset, NormalizationPolicy, load_manifest

    meta, exp = _load_run(run_dir)
    if manifest is None:
        key = {"train": "train_manifest", "valid": "valid_manifest"}.get(split)
        if key and exp.get(key):
            manifest = exp[key]
        elif exp.get("data"):
            manifest = str(Path(exp["data"]) / f"{split}.csv")
        elif exp.get("valid_manifest"):
            manifest = str(Path(exp["valid_manifest"]).parent / f"{split}.csv")
        else:
            raise InputError("cannot locate the evaluation manifest; pass --manifest")
    if not Path(manifest).exists():
        raise NotFoundError(f"manifest {manifest} does not exist")
    norm = NormalizationPolicy.from_dict(meta["normalization"])
    return ImageDataset(load_manifest(manifest), meta["image_size"], norm, meta.get("label_policy",
                        "uncertain_as_negative"))


def _predict_run(run_dir: Path, split: str, manifest: str | None):
    from .trainer import label_matrix

    ds = _eval_dataset(run_dir, split, manifest)
    ens = _ensemble(run_dir)
    return label_matrix(ds, ens.predict(ds)), ens


def cmd_eval(args) -> int:
    from .evaluator import evaluate, paired_difference, save_predictions
    from .seeding import derive_seed

    cfg = merge_config(EVAL_DEFAULTS, args)
    seed = derive_seed(cfg["seed"], "bootstrap")
    if args.compare:
        run_a, run_b = (Path(p) for p in args.compare)
        lm_a, ens_a = _predict_run(run_a, cfg["split"], cfg["manifest"])
        lm_b, ens_b = _predict_run(run_b, cfg["split"], cfg["manifest"])
        result = paired_difference(lm_a, lm_b, cfg["replicates"], seed)
        out = Path(cfg["out"] or run_a)
        out.mkdir(parents=True, exist_ok=True)
        payload = {
            "model_a": ens_a.plan.name, "run_a": str(run_a),
            "model_b": ens_b.plan.name, "run_b": str(run_b),
            "split": cfg["split"], "difference": result.diff, "ci": list(result.ci),
            "significant": result.significant, "n_replicates": cfg["replicates"], "seed": cfg["seed"],
            "redraws": result.bootstrap.redraws,
        }
        name = f"compare_{ens_a.plan.name}_vs_{ens_b.plan.name}_{cfg['split']}.json"
        (out / name).write_text(json.dumps(payload, indent=2) + "\n")
        verdict = "significant" if result.significant else "not significant"
        print(f"{ens_a.plan.name} - {ens_b.plan.name}: difference {result.format()} ({verdict})")
        return EXIT_OK

    if not args.run:
        raise UsageError("eval needs a run directory or --compare RUN_A RUN_B")
    run_dir = Path(args.run)
    lm, ens = _predict_run(run_dir, cfg["split"], cfg["manifest"])
    report = evaluate(lm, n_replicates=cfg["replicates"], seed=seed, model=ens.plan.name)
    out = Path(cfg["out"] or run_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / f"eval_{cfg['split']}.json")
    save_predictions(out / f"predictions_{cfg['split']}.csv", lm.example_ids, lm.scores, lm.task_names)
    lo, hi = report.ci["avg_auc"]
    print(f"{ens.plan.name} [{cfg['split']}] avg AUC {report.avg_auc:.4f} ({lo:.4f}, {hi:.4f})")
    for task, auc in report.per_task_auc.items():
        print(f"  {task}: {'undefined' if auc is None else f'{auc:.4f}'}")
    return EXIT_OK


# -- analyze -------------------------------------------------------------------------


def record_from_run(run_dir: Path, split: str = "test"):
    from .analysis import ModelRecord
    from .evaluator import EvalReport
    from .registry import count_params
    from .truncation import TruncationPlan, instantiate

    meta, _ = _load_run(run_dir)
    report_path = run_dir / f"eval_{split}.json"
    if not report_path.exists():
        raise NotFoundError(f"{run_dir} has no {report_path.name}; run `cxrtrunc eval` first")
    report = EvalReport.load(report_path)
    plan = TruncationPlan.load(run_dir / "plan.json")
    return ModelRecord(
        name=plan.name, family=plan.base.family, variant=plan.base.variant, pretrained=bool(meta["pretrained"]),
        param_count=count_params(instantiate(plan)), avg_auc=report.avg_auc, auc_ci=tuple(report.ci["avg_auc"]),
        k=plan.k, imagenet_top1=plan.base.published_imagenet_top1,
    )


def cmd_analyze(args) -> int:
    from .analysis import emit_report, load_study_table, published_table

    if args.table:
        records = published_table() if args.table == "published" else load_study_table(args.table)
    elif args.runs:
        records = [record_from_run(Path(r), args.split) for r in args.runs]
    else:
        raise UsageError("analyze needs --table CSV or --runs RUN...")
    paths = emit_report(records, args.out)
    summary = json.loads(paths["summary"].read_text())
    print(f"{len(records)} model(s); report written to {args.out}")
    for key, corr in summary["correlations"].items():
        if "rho" in corr:
            print(f"  {key}: rho = {corr['rho']:.3f}, p = {corr['p_value']:.3g} (n = {corr['n']})")
    boost = summary["pretraining_boost"]
    if boost["mean_boost"] is not None:
        print(f"  mean pretraining boost: {boost['mean_boost']:.4f} over {len(boost['boosts'])} model(s)")
    return EXIT_OK


# -- cam -----------------------------------------------------------------------------


def cmd_cam(args) -> int:
    from .cam import gradcam, render_grid, render_overlay, save_heatmap, task_index
    from .data import OBSERVATIONS, NormalizationPolicy, load_image
    from .trainer import load_model
    from .truncation import TruncationPlan

    task_index(args.task, OBSERVATIONS)
    models = []
    for run in args.runs:
        run_dir = Path(run)
        meta, _ = _load_run(run_dir)
        plan = TruncationPlan.load(run_dir / "plan.json")
        model = load_model(plan, best_checkpoint(run_dir))
        models.append((plan.name, model, NormalizationPolicy.from_dict(meta["normalization"]), meta["image_size"]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    import torch

    for image_path in args.images:
        if not Path(image_path).exists():
            raise NotFoundError(f"image {image_path} does not exist")
        stem = Path(image_path).stem
        results = []
        for name, model, norm, size in models:
            gray = load_image(image_path, size)
            x = norm.normalize(torch.from_numpy(gray)[None].expand(3, -1, -1))
            res = gradcam(model, x, args.task)
            tag = args.task.replace(" ", "_")
            render_overlay(res, gray, out / f"{stem}_{name}_{tag}.png")
            save_heatmap(res.heatmap, out / f"{stem}_{name}_{tag}_heatmap.csv")
            print(f"{stem} {name}: p({args.task}) = {res.probability:.3f}, "
                  f"grid {res.heatmap.shape[0]}x{res.heatmap.shape[1]}, peak at {res.peak}")
            results.append((res, gray))
        if len(results) > 1:
            if len({g.shape for _, g in results}) == 1:
                grid = out / f"{stem}_{args.task.replace(' ', '_')}_grid.png"
                render_grid([r for r, _ in results], results[0][1], grid)
    return EXIT_OK


# -- parser --------------------------------------------------------------------------


def build_parser() -> Parser:
    parser = Parser(prog="cxrtrunc", description="Truncated CNN backbones for multilabel chest X-ray classification.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=Parser, metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("synth", help="write a synthetic dataset with planted texture patches")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, default=500, help="number of images (default 500)")
    p.add_argument("--size", type=int, default=64, help="image side in pixels (default 64)")
    p.add_argument("--tasks", type=int, default=6, help="number of planted tasks (default 6)")
    p.add_argument("--seed", type=int, default=0, help="generation seed (default 0)")
    p.add_argument("--positive-rate", type=float, default=0.5, help="per-task positive probability (default 0.5)")
    p.add_argument("--uncertain-rate", type=float, default=0.0, help="fraction of labels marked uncertain (default 0)")
    p.set_defaults(func=cmd_synth)

    s = argparse.SUPPRESS
    p = sub.add_parser("train", help="finetune a (truncated) backbone and build its checkpoint ensemble",
                       argument_default=s)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--config", help="JSON file of defaults; explicit flags win")
    p.add_argument("--data", help="dataset directory holding train.csv and valid.csv")
    p.add_argument("--train-manifest", help="training manifest CSV")
    p.add_argument("--valid-manifest", help="validation manifest CSV")
    p.add_argument("--family", help="architecture family, e.g. densenet, resnet, toy (default toy)")
    p.add_argument("--variant", help="family variant, e.g. 121, 18, B0, 3x32")
    p.add_argument("--k", type=int, help="number of trailing block groups to remove (default 0)")
    p.add_argument("--pretrained", type=_bool, help="initialise retained blocks from pretrained weights (default false)")
    p.add_argument("--weights", help="pretrained weights: checkpoint path, URL, torchvision:<name>, or a run directory")
    p.add_argument("--weights-config", help="JSON mapping of architecture names to weight locations")
    p.add_argument("--synthetic-weights", type=_bool, help="use seeded random stand-in weights (offline testing)")
    p.add_argument("--image-size", type=int, help="input side in pixels (default 64)")
    p.add_argument("--normalization", choices=("imagenet_stats", "dataset_stats"),
                   help="override the normalisation choice (default: imagenet_stats iff pretrained)")
    p.add_argument("--stats-sample-cap", type=int, help="max images sampled for dataset statistics")
    p.add_argument("--learning-rate", "--lr", dest="learning_rate", type=float, help="Adam learning rate (default 1e-4)")
    p.add_argument("--batch-size", type=int, help="global batch size (default 16)")
    p.add_argument("--epochs", type=int, help="training epochs (default 3)")
    p.add_argument("--eval-every", type=int, help="gradient steps between checkpoints (default 8192)")
    p.add_argument("--ensemble-size", type=int, help="checkpoints in the final ensemble (default 10)")
    p.add_argument("--label-policy", choices=("uncertain_as_negative", "uncertain_as_positive", "drop_uncertain"),
                   help="handling of uncertain labels (default uncertain_as_negative)")
    p.add_argument("--seed", type=int, help="top-level seed for init and data order (default 0)")
    p.add_argument("--deterministic", type=_bool, help="deterministic kernels (default true)")
    p.add_argument("--workers", type=int, help="image decoding threads (default 1)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a run's ensemble with bootstrap CIs, or compare two runs",
                       argument_default=s)
    p.add_argument("run", nargs="?", default=None, help="run directory")
    p.add_argument("--compare", nargs=2, metavar=("RUN_A", "RUN_B"), default=None,
                   help="paired bootstrap of avg AUC(A) - avg AUC(B)")
    p.add_argument("--config", help="JSON file of defaults; explicit flags win")
    p.add_argument("--split", choices=("train", "valid", "test"), help="dataset split (default test)")
    p.add_argument("--manifest", help="explicit manifest CSV (overrides --split lookup)")
    p.add_argument("--replicates", type=int, help="bootstrap replicates (default 1000)")
    p.add_argument("--seed", type=int, help="top-level seed for the bootstrap (default 0)")
    p.add_argument("--out", help="output directory (default: the run directory)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="correlations, pretraining boost and plots for a study table")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--table", help="study-table CSV, or 'published' for the bundled reference table")
    src.add_argument("--runs", nargs="+", help="evaluated run directories")
    p.add_argument("--split", default="test", help="which eval report to read from runs (default test)")
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("cam", help="class activation map overlays from the best checkpoint of each run")
    p.add_argument("runs", nargs="+", help="run directories; several runs render a left-to-right grid")
    p.add_argument("--images", nargs="+", required=True, help="input image paths")
    p.add_argument("--task", required=True, help="observation name, e.g. 'Pleural Effusion'")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_cam)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"cxrtrunc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CxrTruncError, OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"cxrtrunc: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
