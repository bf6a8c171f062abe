"""Command-line interface: ``mpdf <subcommand> --help`` lists every flag."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ModelConfig, load_config_file, load_model_config
from .synthdata import CATEGORIES, GeneratorConfig, SyntheticSample, generate_dataset, load_manifest, read_sample_arrays

log = logging.getLogger("mpdf")

_FIELD_HELP = {
    "f": "unimodal feature width (cross-modal width is 2f)",
    "w": "conv-attention kernel size (odd)",
    "N": "number of conv-attention blocks",
    "L": "number of mixing levels",
    "r": "audio steps per visual frame",
    "T_v": "visual frames per sample",
    "D_v": "visual feature dimension",
    "B": "audio bins",
    "groupnorm_groups": "GroupNorm groups in the attention blocks",
    "n_heads": "attention heads",
    "n_layers": "causal encoder/decoder layers",
    "dropout": "dropout probability",
    "feature_set": "comma-separated subset of C,V,A",
    "attention_kind": "convolutional, transformer-1 or transformer-3",
    "pooled": "max-pool mixer outputs before the classification head (any T)",
    "margin": "contrastive margin",
    "contrastive_enabled": "add the frame-level contrastive terms",
    "lambda_reg": "weight of the IoU regression loss",
    "lambda_rec": "weight of the reconstruction loss",
    "lambda_scls": "weight of the video-level focal loss",
    "focal_alpha": "focal loss alpha",
    "focal_gamma": "focal loss gamma",
    "lr": "Adam learning rate",
    "batch_size": "samples per batch",
    "epochs": "training epochs",
    "seed": "training seed",
    "score_threshold": "minimum proposal score before NMS",
    "pre_nms_topk": "proposals kept per pyramid level before NMS",
    "nms_iou": "NMS IoU threshold",
}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_model_flags(p: argparse.ArgumentParser, skip: tuple[str, ...] = ()) -> None:
    g = p.add_argument_group("model / training (override the config file)")
    for field in dataclasses.fields(ModelConfig):
        if field.name in skip:
            continue
        help_ = _FIELD_HELP.get(field.name, field.name)
        default = field.default
        if field.type in ("bool", bool):
            g.add_argument(_flag(field.name), dest=field.name, action=argparse.BooleanOptionalAction, default=None,
                           help=f"{help_} (default {default})")
        elif field.name == "feature_set":
            g.add_argument(_flag(field.name), dest=field.name, default=None, help=f"{help_} (default C,V,A)")
        else:
            kind = {"int": int, "float": float, "str": str}.get(str(field.type), str)
            g.add_argument(_flag(field.name), dest=field.name, type=kind, default=None, metavar=field.name.upper(),
                           help=f"{help_} (default {default})")


def _model_config(args) -> ModelConfig:
    overrides = {f.name: getattr(args, f.name, None) for f in dataclasses.fields(ModelConfig)}
    if overrides.get("feature_set"):
        overrides["feature_set"] = tuple(x.strip().upper() for x in overrides["feature_set"].split(",") if x.strip())
    return load_model_config(args.config, **overrides)


def _parse_counts(text: str) -> dict[str, int]:
    counts = {}
    for item in text.split(","):
        cat, _, n = item.partition("=")
        if not n:
            raise ValueError(f"--counts expects CATEGORY=N pairs, got {item!r}")
        counts[cat.strip().upper()] = int(n)
    return counts


def _parse_floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",")]


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate_data(args) -> int:
    data = load_config_file(args.config) if args.config else {}
    gen = GeneratorConfig.from_dict(data.get("generator", {}))
    ds = data.get("dataset", {})
    if args.counts:
        counts = _parse_counts(args.counts)
    elif args.n_per_category is not None:
        counts = args.n_per_category
    else:
        counts = ds.get("counts") or ds.get("n_per_category", 10)
    split = _parse_floats(args.split) if args.split else ds.get("split", [0.7, 0.3])
    seed = args.seed if args.seed is not None else int(ds.get("seed", 0))
    m = generate_dataset(gen, counts, split, seed=seed, out_dir=args.out)
    print(f"wrote {len(m.entries)} samples to {args.out}")
    return 0


def _train(args, task: str) -> int:
    from .trainer import train_classifier, train_localizer

    config = _model_config(args)
    manifest = load_manifest(args.data)
    _check_generator(config, manifest.generator_config)
    train = train_classifier if task == "classification" else train_localizer
    result = train(config, manifest, args.out)
    summary = {"best_epoch": result.best_epoch, **result.best_metrics}
    if task == "localization":
        from .evaluation import write_proposals
        from .trainer import predict_proposals, stack_samples, _held_out_split

        held = manifest.load_split(_held_out_split(manifest))
        write_proposals(Path(args.out) / "proposals.jsonl", predict_proposals(result.model, stack_samples(held), config))
    with open(Path(args.out) / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    print(json.dumps(summary, sort_keys=True))
    return 0


def _check_generator(config: ModelConfig, gen: GeneratorConfig) -> None:
    for name in ("T_v", "D_v", "B", "r"):
        if getattr(config, name) != getattr(gen, name) and not (name == "T_v" and config.pooled):
            raise ValueError(f"model {name}={getattr(config, name)} does not match the dataset ({getattr(gen, name)})")


def cmd_eval(args) -> int:
    from .evaluation import classification_report, evaluate_localization, read_proposals, write_proposals

    manifest = load_manifest(args.data)
    entries = manifest.split(args.split) if args.split else manifest.entries
    if not entries:
        raise ValueError(f"split {args.split!r} is empty")
    if args.proposals:
        if args.checkpoint:
            raise ValueError("give either --proposals or --checkpoint, not both")
        props = read_proposals(args.proposals)
        report = _localization_report(props, entries, evaluate_localization)
    elif args.checkpoint:
        from .checkpoint import load_checkpoint
        from .trainer import predict_proposals, predict_scores, stack_samples

        model, config, task, _ = load_checkpoint(args.checkpoint)
        _check_generator(config, manifest.generator_config)
        batch = stack_samples([manifest.load(e) for e in entries])
        if task == "classification":
            report = classification_report(predict_scores(model, batch), batch.labels.numpy())
        else:
            props = predict_proposals(model, batch, config)
            if args.dump_proposals:
                write_proposals(args.dump_proposals, props)
            report = _localization_report(props, entries, evaluate_localization)
        report = {"task": task, **report}
    else:
        raise ValueError("eval needs --proposals or --checkpoint")
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def _localization_report(props, entries, evaluate):
    gts = {e.sample_id: [tuple(s) for s in e.segments] for e in entries}
    unknown = set(props) - set(gts)
    if unknown:
        raise ValueError(f"proposals reference {len(unknown)} sample ids missing from the split, e.g. {sorted(unknown)[0]}")
    return evaluate({sid: props.get(sid, []) for sid in gts}, gts).as_dict()


def cmd_ablate(args) -> int:
    from .trainer import GRIDS, run_ablation

    config = _model_config(args)
    manifest = load_manifest(args.data)
    _check_generator(config, manifest.generator_config)
    from .trainer import _held_out_split

    train = manifest.load_split("train")
    held = manifest.load_split(_held_out_split(manifest))
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [config.seed]
    rows = run_ablation(config, GRIDS[args.grid], train, held, task=args.task, seeds=seeds, out_csv=args.out)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def cmd_export_heatmaps(args) -> int:
    from .checkpoint import load_checkpoint
    from .heatmaps import export_heatmaps, real_reference, difference_maps

    model, config, _, _ = load_checkpoint(args.checkpoint)
    samples, reference = [], None
    if args.data:
        manifest = load_manifest(args.data)
        by_id = {e.sample_id: e for e in manifest.entries}
        for sid in args.sample:
            if sid not in by_id:
                raise ValueError(f"sample {sid!r} not in {args.data}")
            samples.append(manifest.load(by_id[sid]))
        reals = [manifest.load(e) for e in manifest.entries if e.label == 0][: args.reference_size]
        if reals:
            reference = real_reference(difference_maps(model, reals))
    else:
        for path in args.sample:
            visual, audio, r = read_sample_arrays(path)
            samples.append(SyntheticSample(visual, audio, 0, (0, 0), [], Path(path).stem, r))
    for s in samples:
        if s.visual_raw.shape[1] != config.D_v or s.audio_raw.shape[1] != config.B or s.r != config.r:
            raise ValueError(
                f"sample {s.sample_id} (D_v={s.visual_raw.shape[1]}, B={s.audio_raw.shape[1]}, r={s.r}) does not "
                f"match the checkpoint (D_v={config.D_v}, B={config.B}, r={config.r})"
            )
        if s.T_v != config.T_v and not config.pooled:
            raise ValueError(f"sample {s.sample_id} has T_v={s.T_v}, checkpoint expects {config.T_v}")
    export_heatmaps(model, samples, args.out, reference=reference, vmax=args.vmax, png=not args.no_png)
    print(f"wrote heatmaps for {len(samples)} sample(s) to {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mpdf", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write a synthetic dataset (manifest.jsonl + samples/)")
    g.add_argument("--config", help="YAML file; reads the 'generator' and 'dataset' sections")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, help="dataset seed (default: dataset.seed or 0)")
    g.add_argument("--n-per-category", type=int, help=f"samples per category, categories: {','.join(CATEGORIES)}")
    g.add_argument("--counts", help="explicit per-category counts, e.g. PARTIAL=1000,RVRA=500")
    g.add_argument("--split", help="comma-separated split ratios: train,test or train,val,test")
    g.set_defaults(func=cmd_generate_data)

    for name, task, help_ in (
        ("train-cls", "classification", "train the video-level classifier"),
        ("train-loc", "localization", "train the temporal localizer"),
    ):
        t = sub.add_parser(name, help=help_)
        t.add_argument("--data", required=True, help="dataset directory")
        t.add_argument("--out", required=True, help="output directory for model.ckpt, metrics.csv, summary.json")
        t.add_argument("--config", help="YAML model/training config")
        _add_model_flags(t)
        t.set_defaults(func=lambda a, task=task: _train(a, task))

    e = sub.add_parser("eval", help="score a checkpoint or a proposal dump against a dataset split")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--split", default="test", help="split to evaluate (empty string for all samples)")
    e.add_argument("--proposals", help="proposal dump (JSON lines of sample_id, start, end, score)")
    e.add_argument("--checkpoint", help="model checkpoint")
    e.add_argument("--dump-proposals", help="with a localization checkpoint, also write its proposals here")
    e.add_argument("--out", help="metrics JSON report path")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate one ablation grid")
    a.add_argument("--data", required=True, help="dataset directory")
    a.add_argument("--grid", required=True, choices=["kernel", "depth", "attention", "feature"])
    a.add_argument("--task", default="classification", choices=["classification", "localization"])
    a.add_argument("--seeds", help="comma-separated seeds; metrics are per-cell medians")
    a.add_argument("--out", required=True, help="CSV report path")
    a.add_argument("--config", help="YAML base config")
    _add_model_flags(a)
    a.set_defaults(func=cmd_ablate)

    h = sub.add_parser("export-heatmaps", help="write |P - E| grids (CSV + PNG) for samples")
    h.add_argument("--checkpoint", required=True)
    h.add_argument("--sample", required=True, nargs="+",
                   help="sample ids (with --data) or paths to sample .bin files")
    h.add_argument("--data", help="dataset directory; enables labels and separation scores")
    h.add_argument("--reference-size", type=int, default=50, help="real samples used for the reference level")
    h.add_argument("--out", required=True)
    h.add_argument("--vmax", type=float, default=0.3, help="upper end of the colour scale")
    h.add_argument("--no-png", action="store_true", help="skip image rendering")
    h.set_defaults(func=cmd_export_heatmaps)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"mpdf {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
