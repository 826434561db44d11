"""``volseg`` command line: synth-data, preprocess, train, cotrain, predict,
decode-regions, postprocess, evaluate.

Model and training hyperparameters come from a flat ``key=value`` file
(``--config``) overridden by ``--set key=value``; every run writes its
resolved configuration to ``run_config.txt`` next to its outputs.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from . import __version__
from . import config as C
from .data import (LabelVolume, load_manifest, normalize_case, read_volume, synth_cohort,
                   write_manifest, write_volume)
from .errors import (CapacityError, ContractError, DegenerateInputError, NonFiniteError,
                     ParseError, ShapeError)
from .inference import ensemble, load_prediction, predict_tta, predict_volume, save_prediction
from .metrics import CONVENTIONS, evaluate_cohort
from .nn import ModelConfig, build_unet
from .regions import PostprocessRule, apply_et_rule, optimize_threshold
from .trainer import TrainConfig, cotrain, load_checkpoint, train

RUN_CONFIG = "run_config.txt"
PREDICTIONS = "predictions.tsv"


# -- configuration ---------------------------------------------------------------
def allowed_keys() -> set:
    return {f"model.{k}" for k in C.known_keys(ModelConfig)} | C.known_keys(TrainConfig)


def default_run_config() -> Dict[str, str]:
    flat = {f"model.{k}": v for k, v in C.to_flat(ModelConfig()).items()}
    flat.update(C.to_flat(TrainConfig()))
    return flat


def resolve_config(config_path: Optional[str], overrides: List[str], seed: Optional[int],
                   workers: Optional[int]) -> Tuple[ModelConfig, TrainConfig]:
    flat: Dict[str, str] = {}
    if config_path:
        flat.update({k: v for k, v in C.read_flat(config_path).items() if not k.startswith("cli.")})
    source = config_path or "<flags>"
    flat.update(C.parse_lines(overrides, "--set"))
    unknown = sorted(set(flat) - allowed_keys())
    if unknown:
        raise ParseError(source, unknown[0], "unknown config key")
    if seed is not None:
        flat["seed"] = str(seed)
        flat.setdefault("model.init_seed", str(seed))
    if workers is not None:
        flat["workers"] = str(workers)
    model_cfg = C.from_flat(ModelConfig, {k[6:]: v for k, v in flat.items() if k.startswith("model.")}, source=source)
    train_cfg = C.from_flat(TrainConfig, {k: v for k, v in flat.items() if not k.startswith("model.")}, source=source)
    return model_cfg, train_cfg


def write_run_config(out_dir: Path, args, model_cfg=None, train_cfg=None) -> None:
    flat: Dict[str, str] = {}
    if model_cfg is not None:
        flat.update({f"model.{k}": v for k, v in C.to_flat(model_cfg).items()})
    if train_cfg is not None:
        flat.update(C.to_flat(train_cfg))
    for k, v in sorted(vars(args).items()):
        if k in ("func", "set", "config") or v is None:
            continue
        flat[f"cli.{k}"] = C.format_value(tuple(v) if isinstance(v, list) else v)
    C.write_flat(flat, out_dir / RUN_CONFIG)


# -- prediction tables -----------------------------------------------------------
def write_predictions_table(rows: List[Tuple[str, Path, Optional[Path]]], out_dir: Path) -> Path:
    lines = ["# id\tseg\tprob_dir"]
    for case_id, seg, probs in rows:
        rel_seg = seg.relative_to(out_dir) if seg.is_relative_to(out_dir) else seg
        rel_probs = "" if probs is None else (probs.relative_to(out_dir) if probs.is_relative_to(out_dir) else probs)
        lines.append(f"{case_id}\t{rel_seg}\t{rel_probs}")
    path = out_dir / PREDICTIONS
    path.write_text("\n".join(lines) + "\n")
    return path


def read_predictions_table(path) -> List[Tuple[str, Path, Optional[Path]]]:
    path = Path(path)
    rows = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip("\n")
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) < 2:
            raise ParseError(path, f"line {lineno}", "expected id<TAB>seg[<TAB>prob_dir]")
        probs = path.parent / cols[2] if len(cols) > 2 and cols[2].strip() else None
        rows.append((cols[0], path.parent / cols[1], probs))
    return rows


# -- subcommands -----------------------------------------------------------------
def cmd_synth_data(args) -> None:
    out = Path(args.out)
    cases = synth_cohort(args.n, args.size, args.seed or 0, args.et_free_fraction,
                         dataset_tag=args.dataset_tag, id_prefix=args.prefix)
    manifest = write_manifest(cases, out)
    write_run_config(out, args)
    print(manifest)


def cmd_preprocess(args) -> None:
    out = Path(args.out)
    cases = [normalize_case(c) for c in load_manifest(args.manifest)]
    manifest = write_manifest(cases, out)
    write_run_config(out, args)
    print(manifest)


def cmd_train(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_cfg, train_cfg = resolve_config(args.config, args.set, args.seed, args.workers)
    train_cases = load_manifest(args.manifest)
    val_cases = load_manifest(args.val_manifest) if args.val_manifest else train_cases
    write_run_config(out, args, model_cfg, train_cfg)
    model = build_unet(model_cfg)
    result = train(model, train_cases, val_cases, train_cfg, log_path=out / "train_log.tsv",
                   checkpoint_dir=out)
    print(result.checkpoints.get("best", result.checkpoints["final"]))


def cmd_cotrain(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_cfg, train_cfg = resolve_config(args.config, args.set + ["model.num_heads=2"], args.seed, args.workers)
    a = load_manifest(args.manifest_a)
    b = load_manifest(args.manifest_b)
    val_a = load_manifest(args.val_manifest_a) if args.val_manifest_a else a
    val_b = load_manifest(args.val_manifest_b) if args.val_manifest_b else b
    write_run_config(out, args, model_cfg, train_cfg)
    model = build_unet(model_cfg)
    result = cotrain(model, a, b, val_a, val_b, train_cfg, log_path=out / "train_log.tsv", checkpoint_dir=out)
    print(result.checkpoints.get("best", result.checkpoints["final"]))


def cmd_predict(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpts = args.ensemble if args.ensemble else [args.checkpoint]
    models = [(str(c), load_checkpoint(c)[0]) for c in ckpts]
    rows = []
    for case in load_manifest(args.manifest):
        preds = []
        for ckpt_id, model in models:
            if args.tta:
                preds.append(predict_tta(model, case, head_index=args.head, checkpoint_id=ckpt_id))
            else:
                preds.append(predict_volume(model, case, head_index=args.head, checkpoint_id=ckpt_id))
        pred = ensemble(preds) if args.ensemble else preds[0]
        prob_dir = save_prediction(pred, out / case.id, case.spacing)
        seg = out / f"{case.id}_seg.vseg"
        write_volume(LabelVolume(pred.labels(args.threshold), case.spacing), seg)
        rows.append((case.id, seg, prob_dir))
    write_run_config(out, args)
    print(write_predictions_table(rows, out))


def cmd_decode_regions(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for case_id, _, prob_dir in read_predictions_table(args.predictions):
        if prob_dir is None:
            raise ContractError(f"case {case_id}: no probability directory to decode")
        pred, spacing = load_prediction(prob_dir)
        seg = out / f"{case_id}_seg.vseg"
        write_volume(LabelVolume(pred.labels(args.threshold), spacing), seg)
        rows.append((case_id, seg, prob_dir))
    write_run_config(out, args)
    print(write_predictions_table(rows, out))


def _aligned_references(pred_rows, reference_manifest):
    refs = {c.id: c for c in load_manifest(reference_manifest)}
    missing = [r[0] for r in pred_rows if r[0] not in refs or refs[r[0]].label is None]
    if missing:
        raise ContractError(f"no reference label for case {missing[0]}")
    return [refs[r[0]] for r in pred_rows]


def cmd_postprocess(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = read_predictions_table(args.predictions)
    preds = [read_volume(seg) for _, seg, _ in rows]
    if args.optimize_threshold:
        if not args.references:
            raise ContractError("--optimize-threshold needs --references")
        refs = _aligned_references(rows, args.references)
        rule = optimize_threshold([p.data for p in preds], [r.label.data for r in refs])
        rule.save(out / "rule.txt")
    else:
        rule = PostprocessRule.load(args.rule)
    new_rows = []
    for (case_id, _, prob_dir), pred in zip(rows, preds):
        seg = out / f"{case_id}_seg.vseg"
        write_volume(LabelVolume(apply_et_rule(pred.data, rule), pred.spacing), seg)
        new_rows.append((case_id, seg, prob_dir))
    write_run_config(out, args)
    write_predictions_table(new_rows, out)
    print(f"et_min_voxels={rule.et_min_voxels}")


def cmd_evaluate(args) -> None:
    rows = read_predictions_table(args.predictions)
    refs = _aligned_references(rows, args.references)
    preds = [read_volume(seg) for _, seg, _ in rows]
    for (case_id, _, _), p, r in zip(rows, preds, refs):
        if p.shape != r.shape:
            raise ShapeError(f"case {case_id}: prediction {p.shape} vs reference {r.shape}")
    report = evaluate_cohort([p.data for p in preds], [r.label.data for r in refs],
                             [r.spacing for r in refs], [r.id for r in refs], args.sentinel)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    write_run_config(out.parent, args)
    print(out)


# -- parser ------------------------------------------------------------------------
class _VersionAction(argparse.Action):
    def __init__(self, option_strings, dest=argparse.SUPPRESS, default=argparse.SUPPRESS, help=None):
        super().__init__(option_strings, dest=dest, default=default, nargs=0, help=help)

    def __call__(self, parser, namespace, values, option_string=None):
        print(f"volseg {__version__}")
        for k, v in CONVENTIONS.items():
            print(f"{k}={v}")
        parser.exit()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="volseg", description=__doc__.split("\n\n")[0].replace("\n", " "))
    parser.add_argument("--version", action=_VersionAction, help="print version and metric conventions")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=False):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=None)
        if config:
            p.add_argument("--config", help="flat key=value file")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                           help="override one config key (repeatable)")

    p = sub.add_parser("synth-data", help="generate a synthetic cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--et-free-fraction", type=float, default=0.3)
    p.add_argument("--dataset-tag", type=int, default=0)
    p.add_argument("--prefix", default="synth")
    common(p)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("preprocess", help="brain-region z-score normalization")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a single-head U-Net")
    p.add_argument("--manifest", required=True)
    p.add_argument("--val-manifest")
    p.add_argument("--out", required=True)
    common(p, config=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cotrain", help="train on two datasets with separate heads")
    p.add_argument("--manifest-a", required=True)
    p.add_argument("--manifest-b", required=True)
    p.add_argument("--val-manifest-a")
    p.add_argument("--val-manifest-b")
    p.add_argument("--out", required=True)
    common(p, config=True)
    p.set_defaults(func=cmd_cotrain)

    p = sub.add_parser("predict", help="whole-volume prediction")
    p.add_argument("--manifest", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--checkpoint")
    group.add_argument("--ensemble", nargs="+", metavar="CKPT")
    p.add_argument("--tta", action="store_true", help="average over all mirror combinations")
    p.add_argument("--head", type=int, default=0)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("decode-regions", help="probabilities -> label maps")
    p.add_argument("--predictions", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_decode_regions)

    p = sub.add_parser("postprocess", help="enhancing-tumor size rule")
    p.add_argument("--predictions", required=True)
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--optimize-threshold", action="store_true")
    mode.add_argument("--rule")
    p.add_argument("--references", help="manifest with reference labels")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("evaluate", help="Dice / HD95 / sensitivity / specificity report")
    p.add_argument("--predictions", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--sentinel", type=float, default=None, help="HD95 when exactly one mask is empty")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_evaluate)
    return parser


_EXPECTED_ERRORS = (ParseError, ContractError, ShapeError, DegenerateInputError, CapacityError,
                    NonFiniteError, ValueError, IndexError, OSError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except _EXPECTED_ERRORS as exc:
        message = " ".join(str(exc).split())
        print(f"volseg: error: {args.command}: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
