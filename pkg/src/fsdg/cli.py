"""Command-line entry points.

Every subcommand honors ``--seed``, ``--config`` (a flat dotted-key file,
``objective.lambda_cs = 0.05`` per line), and ``--out-dir``; command-line
flags override the config file. Each run writes ``run.json`` recording
the resolved configuration, the seed, and content hashes of its file
inputs. Failures exit 2 (configuration), 3 (data), or 4 (numerics) with
a single parsable line on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .data import ImageDataset
from .errors import ConfigError, FsdgError, NumericError
from .explain import (
    SEGMENTS,
    compute_relevance,
    ground_truth_matrix,
    overlap_matrix,
    segment_overlap_stats,
    spearman_alignment,
)
from .featurespace import FeatureMap, PartitionSpec
from .hierarchy import GranularityHierarchy, load_hierarchy
from .losses import (
    commonality_scale_similarity,
    commonality_sibling_similarity,
    common_subcentroids,
    decorrelation_loss,
    specificity_centroids,
    specificity_separation,
    structuralization_terms,
)
from .manifest import file_hash, load_images, load_manifest, write_dataset
from .network import load_checkpoint, prune_to_fine, save_checkpoint, save_pruned_checkpoint
from .objectives import (
    BranchOutputs,
    EpsilonSchedule,
    MODES,
    ObjectiveConfig,
    prediction_calibration,
)
from .synthdata import DOMAIN_PRESETS, SynthSpec, generate
from .tableio import write_dicts, write_matrix
from .trainer import (
    DEFAULT_SEARCH_SPACE,
    TrainConfig,
    evaluate,
    gradient_check,
    grid_search_with_training,
    train,
)


def _parse_scalar(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config_file(path: str | Path) -> dict:
    """Flat dotted-key config: one ``key = value`` per line, ``#`` comments."""
    out: dict = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = _parse_scalar(value.strip())
    return out


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(text).replace(",", " ").split())


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in str(text).replace(",", " ").split())


def build_train_config(config: dict, seed: int) -> TrainConfig:
    """Assemble a TrainConfig from a flat dotted-key dictionary."""
    def get(key, default):
        return config.get(key, default)

    epsilon = EpsilonSchedule(
        kind=get("objective.epsilon.kind", "linear_ramp"),
        start=float(get("objective.epsilon.start", 0.0)),
        end=float(get("objective.epsilon.end", 1.0)),
        ramp_fraction=float(get("objective.epsilon.ramp_fraction", 0.5)),
    )
    objective = ObjectiveConfig(
        lambda_cs=float(get("objective.lambda_cs", 0.05)),
        lambda_cd=float(get("objective.lambda_cd", 0.5)),
        lambda_p=float(get("objective.lambda_p", 1.0)),
        lambda_dec=float(get("objective.lambda_dec", 1.0)),
        metric=get("objective.metric", "cosine"),
        epsilon=epsilon,
        mode=get("train.mode", "fsdg"),
    )
    widths = get("model.widths", None)
    return TrainConfig(
        epochs=int(get("train.epochs", 10)),
        batch_size=int(get("train.batch_size", 32)),
        lr=float(get("train.lr", 0.003)),
        momentum=float(get("train.momentum", 0.9)),
        branch_lr_multiplier=float(get("train.branch_lr_multiplier", 10.0)),
        lr_coeff_start=float(get("train.lr_coeff_start", 1.0)),
        lr_coeff_end=float(get("train.lr_coeff_end", 0.1)),
        seed=seed,
        stream=get("train.stream", "dual"),
        backbone=get("model.backbone", "smallconv"),
        backbone_widths=_int_list(widths) if widths is not None else None,
        transition_channels=int(get("model.transition_channels", 256)),
        ratios=(
            float(get("partition.r_c", 0.5)),
            float(get("partition.r_p", 0.3)),
            float(get("partition.r_n", 0.2)),
        ),
        objective=objective,
        class_balanced=bool(get("train.class_balanced", False)),
    )


def _resolve_config(args: argparse.Namespace, overrides: dict) -> dict:
    config: dict = {}
    if args.config:
        config.update(load_config_file(args.config))
    for key, value in overrides.items():
        if value is not None:
            config[key] = value
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        config[key.strip()] = _parse_scalar(value.strip())
    return config


def _write_run_record(
    out_dir: Path, command: str, argv: list[str], seed: int,
    config: dict, inputs: list[str | Path], outputs: list[str],
) -> None:
    record = {
        "command": command,
        "argv": argv,
        "version": __version__,
        "seed": seed,
        "out_dir": str(out_dir),
        "config": {k: config[k] for k in sorted(config)},
        "inputs": {str(p): file_hash(p) for p in inputs if p and Path(p).is_file()},
        "outputs": sorted(outputs),
    }
    with open(out_dir / "run.json", "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out_dir(args: argparse.Namespace, command: str) -> Path:
    out = Path(args.out_dir) if args.out_dir else Path("fsdg_out") / command
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- subcommands ---------------------------------------------------------------


def cmd_gen_synth(args: argparse.Namespace) -> int:
    config = _resolve_config(args, {
        "synth.classes_per_level": args.tree,
        "synth.samples_per_class": args.samples_per_class,
        "synth.image_size": args.image_size,
        "synth.noise_level": args.noise,
        "synth.domains": args.domains,
    })
    domain_names = [
        d.strip() for d in str(config.get("synth.domains", "studio,field")).split(",")
    ]
    unknown = [d for d in domain_names if d not in DOMAIN_PRESETS]
    if unknown:
        raise ConfigError(f"unknown domain presets {unknown}; have {sorted(DOMAIN_PRESETS)}")
    spec = SynthSpec(
        classes_per_level=_int_list(config.get("synth.classes_per_level", "16,8,4,2")),
        samples_per_class=int(config.get("synth.samples_per_class", 20)),
        image_size=int(config.get("synth.image_size", 32)),
        domains=tuple(DOMAIN_PRESETS[d] for d in domain_names),
        noise_level=float(config.get("synth.noise_level", 0.02)),
        seed=args.seed,
    )
    out = _out_dir(args, "gen-synth")
    datasets, hierarchy = generate(spec)
    manifest_path = write_dataset(datasets, hierarchy, out)
    total = sum(len(d) for d in datasets.values())
    print(f"wrote {total} images across {len(datasets)} domains to {out}")
    print(f"manifest={manifest_path}")
    _write_run_record(out, "gen-synth", args._argv, args.seed, config,
                      inputs=[args.config] if args.config else [],
                      outputs=["manifest.csv", "hierarchy.txt", "images/"])
    return 0


def _load_domain(manifest_path: str, domain: str) -> tuple[ImageDataset, GranularityHierarchy]:
    manifest = load_manifest(manifest_path)
    return load_images(manifest, domain), manifest.hierarchy


def cmd_train(args: argparse.Namespace) -> int:
    config = _resolve_config(args, {
        "train.mode": args.mode,
        "train.epochs": args.epochs,
        "train.batch_size": args.batch_size,
        "train.lr": args.lr,
    })
    dataset, hierarchy = _load_domain(args.manifest, args.domain)
    cfg = build_train_config(config, args.seed)
    out = _out_dir(args, "train")
    result = train(cfg, dataset, hierarchy)

    checkpoint_path = out / "checkpoint.pt"
    save_checkpoint(
        checkpoint_path, result.model,
        hierarchy=hierarchy, partition=cfg.partition_spec, objective=cfg.objective,
        train_config=cfg.to_dict(), seed=cfg.seed,
    )
    result.steplog.to_jsonl(out / "steplog.jsonl")
    outputs = ["checkpoint.pt", "steplog.jsonl"]
    if args.prune:
        pruned = prune_to_fine(result.model)
        save_pruned_checkpoint(
            out / "checkpoint_fine.pt", pruned, result.model,
            hierarchy=hierarchy, partition=cfg.partition_spec,
            objective=cfg.objective, seed=cfg.seed,
        )
        outputs.append("checkpoint_fine.pt")
    source_acc = evaluate(result.model, dataset, hierarchy)
    print(f"mode={cfg.mode} steps={len(result.steplog)} "
          f"final_total={result.steplog.final('total'):.4f}")
    print(f"train_domain={args.domain} fine_accuracy={source_acc.accuracy:.4f}")
    if args.plots:
        from . import plots
        plots.plot_steplog(result.steplog, out / "steplog.png")
    _write_run_record(out, "train", args._argv, args.seed, config,
                      inputs=[args.manifest, args.config],
                      outputs=outputs)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = _resolve_config(args, {})
    dataset, hierarchy = _load_domain(args.manifest, args.domain)
    model, meta = load_checkpoint(args.checkpoint)
    result = evaluate(model, dataset, hierarchy)
    out = _out_dir(args, "eval")
    rows = [{"domain": args.domain, "level": 0, "accuracy": result.accuracy, "n": result.n}]
    print(f"domain={args.domain} fine_accuracy={result.accuracy:.4f} n={result.n}")
    for g, acc in sorted((result.per_level or {}).items()):
        rows.append({"domain": args.domain, "level": g, "accuracy": acc, "n": result.n})
        print(f"domain={args.domain} level{g}_accuracy={acc:.4f}")
    write_dicts(out / "eval.csv", rows)
    _write_run_record(out, "eval", args._argv, args.seed, config,
                      inputs=[args.manifest, args.checkpoint, args.config],
                      outputs=["eval.csv"])
    return 0


def cmd_gridsearch(args: argparse.Namespace) -> int:
    config = _resolve_config(args, {
        "gridsearch.space": args.space,
        "train.epochs": args.epochs,
    })
    manifest = load_manifest(args.manifest)
    train_set = load_images(manifest, args.train_domain)
    val_set = load_images(manifest, args.val_domain)
    cfg = build_train_config(config, args.seed)
    space = (
        _float_list(config["gridsearch.space"])
        if "gridsearch.space" in config else DEFAULT_SEARCH_SPACE
    )
    result = grid_search_with_training(cfg, train_set, val_set, manifest.hierarchy, space)
    out = _out_dir(args, "gridsearch")
    write_dicts(out / "gridsearch.csv", result.table)
    with open(out / "best.json", "w") as fh:
        json.dump({"best": result.best, "score": result.best_score,
                   "runs": result.runs}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"runs={result.runs} best={result.best} score={result.best_score:.4f}")
    _write_run_record(out, "gridsearch", args._argv, args.seed, config,
                      inputs=[args.manifest, args.config],
                      outputs=["gridsearch.csv", "best.json"])
    return 0


def cmd_explain(args: argparse.Namespace) -> int:
    config = _resolve_config(args, {
        "explain.top_n": args.top_n,
        "explain.top_k": args.top_k,
    })
    dataset, hierarchy = _load_domain(args.manifest, args.domain)
    model, meta = load_checkpoint(args.checkpoint)
    part = meta.get("partition")
    if part is None:
        raise ConfigError("checkpoint lacks a partition spec; cannot split segments")
    spec = PartitionSpec(r_c=part["r_c"], r_p=part["r_p"], r_n=part["r_n"], d=part["d"])
    classes = (
        _int_list(args.classes) if args.classes else tuple(range(hierarchy.num_fine))
    )
    top_n = int(config.get("explain.top_n", 40))
    top_k = int(config.get("explain.top_k", 26))

    table = compute_relevance(model, dataset, top_n=top_n)
    out = _out_dir(args, "explain")
    with open(out / "relevance.jsonl", "w") as fh:
        for j, recs in enumerate(table.records):
            fh.write(json.dumps({
                "channel": j,
                "records": [
                    {"sample": r.sample_id, "relevance": r.relevance, "label": r.label}
                    for r in recs
                ],
            }) + "\n")

    outputs = ["relevance.jsonl", "ground_truth.csv", "segment_stats.csv", "spearman.csv"]
    truth = ground_truth_matrix(hierarchy, classes)
    write_matrix(out / "ground_truth.csv", truth, classes)
    spearman_rows = []
    for segment in SEGMENTS:
        om = overlap_matrix(table, classes, top_k=top_k, segment=segment, spec=spec)
        name = f"overlap_{segment}.csv"
        write_matrix(out / name, om.matrix, classes)
        outputs.append(name)
        rho = spearman_alignment(om, truth)
        spearman_rows.append({"segment": segment, "spearman": rho})
        print(f"segment={segment} spearman={rho:.4f}")
        if args.plots:
            from . import plots
            plots.plot_overlap(om.matrix, classes, out / f"overlap_{segment}.png",
                               title=segment)
    write_dicts(out / "spearman.csv", spearman_rows)

    stats = segment_overlap_stats(table, classes, spec, top_k=top_k)
    write_dicts(out / "segment_stats.csv", stats)
    mean_ratio = sum(r["RatioCom"] for r in stats) / len(stats)
    print(f"mean_ratio_common={mean_ratio:.4f}")
    _write_run_record(out, "explain", args._argv, args.seed, config,
                      inputs=[args.manifest, args.checkpoint, args.config],
                      outputs=outputs)
    return 0


def cmd_sclass(args: argparse.Namespace) -> int:
    config = _resolve_config(args, {})
    hierarchy = load_hierarchy(args.hierarchy)
    classes = (
        _int_list(args.classes) if args.classes else tuple(range(hierarchy.num_fine))
    )
    matrix = ground_truth_matrix(hierarchy, classes)
    out = _out_dir(args, "sclass")
    write_matrix(out / "sclass.csv", matrix, classes)
    header = " ".join(f"{c:>3d}" for c in classes)
    print(f"      {header}")
    for i, c in enumerate(classes):
        print(f"{c:>4d}  " + " ".join(f"{v:>3d}" for v in matrix[i]))
    _write_run_record(out, "sclass", args._argv, args.seed, config,
                      inputs=[args.hierarchy, args.config], outputs=["sclass.csv"])
    return 0


def _gradcheck_suite(seed: int, step: float) -> list[dict]:
    """Small random instances of every differentiable quantity."""
    from .synthdata import build_tree

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    tree = build_tree((8, 4, 2))
    spec = PartitionSpec(d=6)
    rows: list[dict] = []

    def check(name: str, fn, *tensors):
        rows.append({"quantity": name, "max_rel_err": gradient_check(fn, tensors, step)})

    B, S = 4, 5
    protos = torch.randn(B, 3, S, dtype=torch.float64)
    check("decorrelation", lambda p: decorrelation_loss(p, "cosine"), protos)
    check("decorrelation_euclidean", lambda p: decorrelation_loss(p, "euclidean"), protos)

    a = torch.randn(B, 3, S, dtype=torch.float64)
    b = torch.randn(B, 3, S, dtype=torch.float64)
    check(
        "scale_similarity",
        lambda x, y: commonality_scale_similarity(FeatureMap(x, 0), FeatureMap(y, 1)),
        a, b,
    )

    labels = np.array([0, 1, 2, 3])
    grouping = tree.group_by_parent(labels, 0)
    common = torch.randn(B, 3, S, dtype=torch.float64)

    def sibling(x):
        sets = common_subcentroids(FeatureMap(x, 0), grouping)
        return torch.stack([
            commonality_sibling_similarity(cs) for cs in sets.values() if cs.size >= 2
        ]).mean()

    check("sibling_similarity", sibling, common)

    specific = torch.randn(B, 2, S, dtype=torch.float64)
    check(
        "separation",
        lambda x: specificity_separation(
            specificity_centroids(FeatureMap(x, 0), np.array([0, 0, 1, 1]))
        ),
        specific,
    )

    logits = [torch.randn(B, k, dtype=torch.float64) for k in (8, 4, 2)]
    check(
        "calibration",
        lambda f, c1, c2: prediction_calibration(
            BranchOutputs([f, c1, c2]), labels, tree, 0.3
        ),
        *logits,
    )

    feats = [torch.randn(B, 6, S, dtype=torch.float64) for _ in range(3)]

    def combined(f0, f1, f2):
        terms = structuralization_terms(
            [FeatureMap(f0, 0), FeatureMap(f1, 1), FeatureMap(f2, 2)],
            spec, tree, labels,
        )
        return (terms.decorrelation - 0.05 * terms.scale_similarity
                - 0.5 * terms.sibling_similarity + terms.separation)

    check("combined_objective", combined, *feats)
    _ = rng  # reserved for future randomized cases
    return rows


def cmd_gradcheck(args: argparse.Namespace) -> int:
    config = _resolve_config(args, {})
    rows = _gradcheck_suite(args.seed, args.step)
    out = _out_dir(args, "gradcheck")
    write_dicts(out / "gradcheck.csv", rows)
    worst = max(r["max_rel_err"] for r in rows)
    for r in rows:
        print(f"{r['quantity']:<24s} max_rel_err={r['max_rel_err']:.3e}")
    _write_run_record(out, "gradcheck", args._argv, args.seed, config,
                      inputs=[args.config], outputs=["gradcheck.csv"])
    if worst > args.tolerance:
        raise NumericError(
            f"gradient check failed: worst relative error {worst:.3e} > {args.tolerance}"
        )
    print(f"ok worst={worst:.3e}")
    return 0


# --- argument wiring ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", default=None, help="flat dotted-key config file")
    common.add_argument("--out-dir", default=None)
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key")

    parser = argparse.ArgumentParser(prog="fsdg", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", parents=[common],
                       help="render the synthetic multi-domain benchmark")
    p.add_argument("--tree", default=None, help="classes per level, e.g. 16,8,4,2")
    p.add_argument("--samples-per-class", type=int, default=None)
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--domains", default=None,
                   help=f"comma list from {sorted(DOMAIN_PRESETS)}")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", parents=[common], help="train one model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--domain", required=True)
    p.add_argument("--mode", choices=MODES, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--prune", action="store_true",
                   help="also write the pruned fine-path checkpoint")
    p.add_argument("--plots", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--domain", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gridsearch", parents=[common],
                       help="progressive sweep of the loss weights")
    p.add_argument("--manifest", required=True)
    p.add_argument("--train-domain", required=True)
    p.add_argument("--val-domain", required=True)
    p.add_argument("--space", default=None, help="comma list of coefficients")
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("explain", parents=[common],
                       help="channel-concept overlap analysis")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--domain", required=True)
    p.add_argument("--classes", default=None, help="comma list; default all fine classes")
    p.add_argument("--top-n", type=int, default=None)
    p.add_argument("--top-k", type=int, default=None)
    p.add_argument("--plots", action="store_true")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("sclass", parents=[common],
                       help="hierarchy ground-truth similarity matrix")
    p.add_argument("--hierarchy", required=True)
    p.add_argument("--classes", default=None)
    p.set_defaults(func=cmd_sclass)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference audit of every loss")
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args._argv = list(argv) if argv is not None else sys.argv[1:]
    try:
        return args.func(args)
    except FsdgError as err:
        print(f"ERROR code={err.exit_code} type={type(err).__name__} "
              f"message={str(err)!r}", file=sys.stderr)
        return err.exit_code


if __name__ == "__main__":
    sys.exit(main())
