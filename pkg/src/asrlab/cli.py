"""Command-line interface.

Exit codes: 0 on success, 1 on domain errors (bad corpora, infeasible
splits, diverged training, ...), 2 on usage errors. Results go to stdout,
diagnostics to stderr. Training-style commands accept a YAML config file
whose keys match the long flags; explicit flags win over the file.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import yaml

from . import corpus as corpus_mod
from .corpus import (
    SplitSpec,
    format_duration,
    read_manifest,
    segment_audio,
    split,
    stats,
    validate,
    write_manifest,
)
from .errors import AsrlabError
from .metrics import corpus_eval
from .model import ModelConfig, TokenizerSpec, preset_config
from .orchestrator import (
    CorpusTriple,
    ExperimentReport,
    load_plan,
    multistage_finetune,
    render_chart,
    run_matrix,
)
from .synthlang import (
    SynthConfig,
    derive_related,
    gen_language,
    load_lexicon,
    save_lexicon,
    synth_corpus,
)
from .textnorm import NormalizationConfig
from .training import (
    TrainConfig,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)

_TRAIN_FLAG_KEYS = (
    "batch_size",
    "grad_accumulation",
    "peak_lr",
    "warmup_steps",
    "total_steps",
    "eval_every",
    "lr_decay",
)


def _parse_ratios(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated ratios")
    try:
        ratios = tuple(float(p) for p in parts)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    return ratios  # range/sum checks live in SplitSpec


def _parse_int_pair(text: str) -> tuple[int, int]:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("expected two comma-separated integers")
    try:
        return int(parts[0]), int(parts[1])
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _parse_float_list(text: str) -> list[float]:
    try:
        return [float(p) for p in text.split(",") if p.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _norm_from_args(args: argparse.Namespace) -> NormalizationConfig:
    if getattr(args, "norm", None):
        return NormalizationConfig.from_string(args.norm)
    return NormalizationConfig(
        remove_punctuation=args.filter_punctuation,
        remove_symbols=args.filter_symbols,
        collapse_whitespace=args.collapse_whitespace,
        trim=args.trim,
    )


def _add_norm_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--filter-punctuation", action="store_true",
                        help="drop Unicode punctuation before scoring")
    parser.add_argument("--filter-symbols", action="store_true",
                        help="drop Unicode symbols before scoring")
    parser.add_argument("--collapse-whitespace", action="store_true",
                        help="fold whitespace runs to single spaces")
    parser.add_argument("--trim", action="store_true",
                        help="strip leading/trailing whitespace")
    parser.add_argument("--norm", metavar="SPEC",
                        help="normalization by name, e.g. 'punctuation+symbols+whitespace+trim'"
                             " (overrides the individual flags)")


def _add_train_flags(parser: argparse.ArgumentParser, prefix: str = "") -> None:
    flag = lambda name: f"--{prefix}{name}" if prefix else f"--{name}"
    parser.add_argument(flag("batch-size"), type=int, default=None)
    parser.add_argument(flag("grad-accumulation"), type=int, default=None)
    parser.add_argument(flag("peak-lr"), type=float, default=None)
    parser.add_argument(flag("warmup-steps"), type=int, default=None)
    parser.add_argument(flag("total-steps"), type=int, default=None)
    parser.add_argument(flag("eval-every"), type=int, default=None)
    parser.add_argument(flag("lr-decay"), choices=("linear", "constant"), default=None)


def _merge_train_config(args: argparse.Namespace, prefix: str = "") -> TrainConfig:
    """defaults < --config file < explicit flags, then validate once."""
    values: dict = {}
    config_path = getattr(args, "config", None)
    if config_path:
        loaded = yaml.safe_load(Path(config_path).read_text(encoding="utf-8")) or {}
        if not isinstance(loaded, dict):
            raise AsrlabError(f"{config_path}: expected a mapping of training options")
        section = loaded.get(f"{prefix.rstrip('_')}", loaded) if prefix else loaded
        for key in _TRAIN_FLAG_KEYS:
            if isinstance(section, dict) and key in section:
                values[key] = section[key]
    for key in _TRAIN_FLAG_KEYS:
        flag_value = getattr(args, f"{prefix}{key}", None)
        if flag_value is not None:
            values[key] = flag_value
    values["seed"] = args.seed
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise AsrlabError(f"bad training configuration: {exc}") from exc


def _model_config_from_args(args: argparse.Namespace, vocab_size: int) -> ModelConfig:
    config = preset_config(args.preset, vocab_size=vocab_size)
    overrides = {}
    if args.max_source_positions is not None:
        overrides["max_source_positions"] = args.max_source_positions
    if args.max_target_positions is not None:
        overrides["max_target_positions"] = args.max_target_positions
    if overrides:
        config = dataclasses.replace(config, **overrides)
    return config


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--preset", choices=("toy", "small", "medium"), default="toy")
    parser.add_argument("--max-source-positions", type=int, default=None)
    parser.add_argument("--max-target-positions", type=int, default=None)


def _log_resolved(out_dir: Path, payload: dict) -> None:
    print(f"resolved config: {json.dumps(payload, sort_keys=True)}", file=sys.stderr)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _train_config_payload(config: TrainConfig) -> dict:
    payload = dataclasses.asdict(config)
    payload["eval_normalization"] = config.eval_normalization.to_string()
    return payload


def _rebase_manifest(manifest, out_dir: Path):
    """Rewrite relative audio paths so the manifest works from out_dir."""
    import os

    rebased = []
    for record in manifest.records:
        audio = manifest.audio_path(record)
        if not Path(record.audio).is_absolute():
            record = dataclasses.replace(
                record, audio=os.path.relpath(audio, out_dir)
            )
        rebased.append(record)
    return dataclasses.replace(manifest, records=rebased, base_dir=out_dir)


# ----------------------------------------------------------------- corpus --


def _cmd_corpus_validate(args) -> int:
    manifest = read_manifest(args.manifest)
    violations = validate(manifest)
    if violations:
        for v in violations:
            print(f"{v.kind} {v.record_id}: {v.detail}")
        print(f"{len(violations)} violation(s) in {args.manifest}", file=sys.stderr)
        return 1
    print(f"ok: {len(manifest.records)} records, {format_duration(manifest.total_seconds)}")
    return 0


def _cmd_corpus_stats(args) -> int:
    report = stats(read_manifest(args.manifest))
    if args.json:
        print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
        return 0
    print(f"utterances      {report.utterance_count}")
    print(f"total duration  {report.total_formatted} ({report.total_seconds:.3f} s)")
    print(f"min/mean/max    {report.min_seconds:.3f} / {report.mean_seconds:.3f} / {report.max_seconds:.3f} s")
    for name, seconds in report.per_split.items():
        print(f"split {name:<14} {format_duration(seconds)}")
    for name, seconds in report.per_speaker.items():
        print(f"speaker {name:<12} {format_duration(seconds)}")
    return 0


def _cmd_corpus_split(args) -> int:
    manifest = read_manifest(args.manifest)
    spec = SplitSpec(
        ratios=args.ratios,
        seed=args.seed,
        stratify_by_speaker=args.stratify,
        tolerance=args.tolerance,
    )
    parts = split(manifest, spec)
    out_dir = Path(args.out_dir) if args.out_dir else Path(args.manifest).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    total = manifest.total_seconds
    for name, part in zip(corpus_mod.SPLIT_NAMES, parts):
        path = out_dir / f"{name}.manifest.jsonl"
        write_manifest(_rebase_manifest(part, out_dir), path)
        share = part.total_seconds / total if total else 0.0
        print(f"{name:<12} {len(part.records):>6} records  {format_duration(part.total_seconds)}  ({share:.1%})")
    return 0


def _cmd_corpus_segment(args) -> int:
    paths, records = segment_audio(args.audio, args.boundaries, args.out_dir, args.base_id)
    for path, record in zip(paths, records):
        print(f"{path}  {record.duration:.3f} s")
    if args.manifest:
        manifest = corpus_mod.Manifest(records=records, base_dir=Path(args.out_dir))
        write_manifest(manifest, args.manifest)
        print(f"wrote draft manifest {args.manifest} (transcripts empty)", file=sys.stderr)
    return 0


# ------------------------------------------------------------------ synth --


def _cmd_synth_gen(args) -> int:
    out_dir = Path(args.out_dir)
    if args.parent_lexicon:
        if args.overlap is None:
            raise AsrlabError("--overlap is required with --parent-lexicon")
        parent = load_lexicon(args.parent_lexicon)
        lexicon = derive_related(parent, args.overlap, args.seed, args.tag)
    else:
        if args.overlap is not None:
            raise AsrlabError("--overlap needs --parent-lexicon")
        lexicon = gen_language(args.seed, args.vocab_size, language_tag=args.tag or "synth")
    config = SynthConfig(
        utterance_words=args.words,
        noise_snr_db=args.snr,
        punctuation_rate=args.punctuation_rate,
        seed=args.seed,
    )
    manifest = synth_corpus(lexicon, args.utterances, config, out_dir, jobs=args.jobs)
    write_manifest(manifest, out_dir / "manifest.jsonl")
    save_lexicon(lexicon, out_dir / "lexicon.json")
    print(f"{len(manifest.records)} utterances, {format_duration(manifest.total_seconds)}")
    print(f"lexicon: {len(lexicon.words)} words -> {out_dir / 'lexicon.json'}")
    if args.split:
        spec = SplitSpec(ratios=tuple(args.split), seed=args.seed)
        for name, part in zip(corpus_mod.SPLIT_NAMES, split(manifest, spec)):
            path = out_dir / f"{name}.manifest.jsonl"
            write_manifest(part, path)
            print(f"{name:<12} {len(part.records):>6} records")
    return 0


# ------------------------------------------------------------------ train --


def _tokenizer_from_manifests(*manifests) -> TokenizerSpec:
    texts: list[str] = []
    for manifest in manifests:
        texts.extend(record.text for record in manifest.records)
    return TokenizerSpec.from_texts(texts)


def _save_result(result, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.best, out_dir / "best.ckpt")
    save_checkpoint(result.final, out_dir / "final.ckpt")
    if result.best.metric_history:
        last = result.best.metric_history[-1]
        print(f"best step {result.best.step}: wer {last['wer']:.4f} cer {last['cer']:.4f}")
    print(f"checkpoints in {out_dir}")


def _cmd_train(args) -> int:
    train_manifest = read_manifest(args.train)
    val_manifest = read_manifest(args.val)
    config = _merge_train_config(args)
    tokenizer = _tokenizer_from_manifests(train_manifest, val_manifest)
    model_config = _model_config_from_args(args, tokenizer.vocab_size)
    out_dir = Path(args.out_dir)
    _log_resolved(
        out_dir,
        {
            "command": "train",
            "train_config": _train_config_payload(config),
            "model_config": model_config.to_dict(),
        },
    )
    result = train(
        (model_config, tokenizer),
        train_manifest,
        val_manifest,
        config,
        log_path=out_dir / "train_log.jsonl",
    )
    _save_result(result, out_dir)
    return 0


def _cmd_finetune_dtf(args) -> int:
    train_manifest = read_manifest(args.train)
    val_manifest = read_manifest(args.val)
    config = _merge_train_config(args)
    if args.base:
        base = load_checkpoint(args.base)
        payload_model = base.model_config.to_dict()
    else:
        tokenizer = _tokenizer_from_manifests(train_manifest, val_manifest)
        model_config = _model_config_from_args(args, tokenizer.vocab_size)
        base = (model_config, tokenizer)
        payload_model = model_config.to_dict()
    out_dir = Path(args.out_dir)
    _log_resolved(
        out_dir,
        {
            "command": "finetune dtf",
            "base": args.base or "fresh",
            "train_config": _train_config_payload(config),
            "model_config": payload_model,
        },
    )
    result = train(base, train_manifest, val_manifest, config, log_path=out_dir / "train_log.jsonl")
    _save_result(result, out_dir)
    return 0


def _cmd_finetune_mtf(args) -> int:
    intermediate = CorpusTriple(
        train=read_manifest(args.inter_train), val=read_manifest(args.inter_val)
    )
    target = CorpusTriple(train=read_manifest(args.train), val=read_manifest(args.val))
    target_config = _merge_train_config(args)
    stage1_config = _merge_train_config(args, prefix="inter_")
    if args.base:
        base = load_checkpoint(args.base)
        payload_model = base.model_config.to_dict()
    else:
        tokenizer = _tokenizer_from_manifests(
            intermediate.train, intermediate.val, target.train, target.val
        )
        model_config = _model_config_from_args(args, tokenizer.vocab_size)
        base = (model_config, tokenizer)
        payload_model = model_config.to_dict()
    out_dir = Path(args.out_dir)
    _log_resolved(
        out_dir,
        {
            "command": "finetune mtf",
            "base": args.base or "fresh",
            "stage1_config": _train_config_payload(stage1_config),
            "stage2_config": _train_config_payload(target_config),
            "model_config": payload_model,
        },
    )
    stage1, stage2 = multistage_finetune(base, intermediate, target, stage1_config, target_config)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(stage1.best, out_dir / "stage1_best.ckpt")
    _save_result(stage2, out_dir)
    return 0


# ------------------------------------------------------------------- eval --


def _read_pairs_file(path: str) -> list[tuple[str, str, str]]:
    pairs = []
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            ref, hyp = obj["ref"], obj["hyp"]
        except (json.JSONDecodeError, TypeError, KeyError) as exc:
            raise AsrlabError(f"{path}:{line_no}: expected JSON with 'ref' and 'hyp' ({exc})") from exc
        pairs.append((str(obj.get("id", f"pair-{line_no:05d}")), str(ref), str(hyp)))
    if not pairs:
        raise AsrlabError(f"{path}: no scoring pairs found")
    return pairs


def _cmd_eval(args) -> int:
    normalization = _norm_from_args(args)
    if args.ref_hyp:
        if args.checkpoint or args.manifest:
            raise AsrlabError("--ref-hyp replaces --checkpoint/--manifest; use one mode")
        report = corpus_eval(_read_pairs_file(args.ref_hyp), normalization, args.unit)
    else:
        if not (args.checkpoint and args.manifest):
            raise AsrlabError("need --checkpoint and --manifest, or --ref-hyp")
        checkpoint = load_checkpoint(args.checkpoint)
        manifest = read_manifest(args.manifest)
        report = evaluate(checkpoint, manifest, normalization, args.unit, jobs=args.jobs)
    print(report.to_table(), end="")
    if args.json:
        Path(args.json).write_text(report.to_jsonl(), encoding="utf-8")
        print(f"wrote {args.json}", file=sys.stderr)
    return 0


# ------------------------------------------------------------- experiment --


def _cmd_experiment_run(args) -> int:
    plan = load_plan(args.plan)
    if args.seed is not None:
        plan.seed = args.seed
        plan.target_train = dataclasses.replace(plan.target_train, seed=args.seed)
        if plan.intermediate_train is not None:
            plan.intermediate_train = dataclasses.replace(plan.intermediate_train, seed=args.seed)
    report = run_matrix(plan)
    print(report.to_table(), end="")
    if args.out_dir:
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
        (out_dir / "report.txt").write_text(report.to_table(), encoding="utf-8")
        render_chart(report, out_dir / "report.svg")
        print(f"report files in {out_dir}", file=sys.stderr)
    failed = [row.name for row in report.rows if row.status == "failed"]
    if failed:
        print(f"failed arms: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def _cmd_report_render(args) -> int:
    data = json.loads(Path(args.report).read_text(encoding="utf-8"))
    report = ExperimentReport.from_dict(data)
    render_chart(report, args.out)
    print(f"wrote {args.out}")
    return 0


# ------------------------------------------------------------------ wiring --


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="asrlab",
        description="Desk-scale lab for low-resource speech recognition transfer experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    corpus_p = sub.add_parser("corpus", help="manifest tools")
    corpus_sub = corpus_p.add_subparsers(dest="subcommand", required=True)

    p = corpus_sub.add_parser("validate", help="check corpus constraints")
    p.add_argument("manifest")
    p.set_defaults(func=_cmd_corpus_validate)

    p = corpus_sub.add_parser("stats", help="duration statistics")
    p.add_argument("manifest")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_corpus_stats)

    p = corpus_sub.add_parser("split", help="duration-balanced train/validation/test split")
    p.add_argument("manifest")
    p.add_argument("--ratios", type=_parse_ratios, required=True, metavar="TRAIN,VAL,TEST")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stratify", action="store_true", help="keep each speaker in one split")
    p.add_argument("--tolerance", type=float, default=0.02)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=_cmd_corpus_split)

    p = corpus_sub.add_parser("segment", help="cut a long recording at boundary times")
    p.add_argument("audio")
    p.add_argument("--boundaries", type=_parse_float_list, required=True, metavar="T1,T2,...")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--base-id", default=None)
    p.add_argument("--manifest", default=None, help="also write a draft manifest here")
    p.set_defaults(func=_cmd_corpus_segment)

    synth_p = sub.add_parser("synth", help="synthetic language corpora")
    synth_sub = synth_p.add_subparsers(dest="subcommand", required=True)

    p = synth_sub.add_parser("gen", help="mint a language (or a related one) and synthesize audio")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--utterances", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vocab-size", type=int, default=60)
    p.add_argument("--tag", default=None, help="language tag for ids and the manifest header")
    p.add_argument("--parent-lexicon", default=None, help="derive from this lexicon JSON")
    p.add_argument("--overlap", type=float, default=None, help="lexical overlap with the parent")
    p.add_argument("--words", type=_parse_int_pair, default=(3, 8), metavar="LO,HI")
    p.add_argument("--snr", type=float, default=30.0, help="noise SNR in dB")
    p.add_argument("--punctuation-rate", type=float, default=0.0)
    p.add_argument("--split", type=_parse_ratios, default=None, metavar="TRAIN,VAL,TEST")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=_cmd_synth_gen)

    p = sub.add_parser("train", help="train from a seeded fresh initialization")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None, help="YAML with training options (flags win)")
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=_cmd_train)

    finetune_p = sub.add_parser("finetune", help="fine-tuning recipes")
    finetune_sub = finetune_p.add_subparsers(dest="subcommand", required=True)

    p = finetune_sub.add_parser("dtf", help="fine-tune directly on the target corpus")
    p.add_argument("--base", default=None, help="checkpoint to start from (fresh init if omitted)")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=_cmd_finetune_dtf)

    p = finetune_sub.add_parser("mtf", help="intermediate stage, then the target stage")
    p.add_argument("--base", default=None, help="checkpoint to start from (fresh init if omitted)")
    p.add_argument("--inter-train", required=True)
    p.add_argument("--inter-val", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    _add_model_flags(p)
    _add_train_flags(p)
    _add_train_flags(p, prefix="inter-")
    p.set_defaults(func=_cmd_finetune_mtf)

    p = sub.add_parser("eval", help="score a checkpoint on a manifest, or a pairs file")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--ref-hyp", default=None,
                   help="JSONL of {'id','ref','hyp'} records to score without a model")
    p.add_argument("--unit", choices=("grapheme", "codepoint"), default="grapheme")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--json", default=None, help="also write the report as JSONL here")
    _add_norm_flags(p)
    p.set_defaults(func=_cmd_eval)

    experiment_p = sub.add_parser("experiment", help="run a transfer comparison matrix")
    experiment_sub = experiment_p.add_subparsers(dest="subcommand", required=True)

    p = experiment_sub.add_parser("run", help="run the zeroshot/intermediate/dtf/mtf matrix")
    p.add_argument("plan", help="YAML plan file")
    p.add_argument("--out-dir", default=None)
    p.add_argument("--seed", type=int, default=None, help="override the plan seed")
    p.set_defaults(func=_cmd_experiment_run)

    report_p = sub.add_parser("report", help="report rendering")
    report_sub = report_p.add_subparsers(dest="subcommand", required=True)

    p = report_sub.add_parser("render", help="bar chart (SVG) from a report.json")
    p.add_argument("report")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report_render)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return int(args.func(args) or 0)
    except AsrlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
