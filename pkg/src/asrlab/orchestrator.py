"""Transfer-learning experiment orchestration.

One plan describes a target language triple (train/validation/test), an
optional intermediate language triple, the model preset, and the scoring
normalizations. Running the plan produces a fixed-order comparison matrix on
the target test split:

    zeroshot      untrained, randomly initialized weights
    intermediate  best checkpoint of the intermediate-language stage alone
    dtf           fine-tuned on the target directly from the fresh init
    mtf           fine-tuned on the target from the intermediate best

DTF and MTF consume identical target-stage step budgets (one shared config),
and the MTF target stage starts bit-identically from the intermediate best
checkpoint, so the matrix isolates what the intermediate stage contributes.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from .corpus import Manifest, read_manifest
from .errors import AsrlabError
from .metrics import EvalReport
from .model import (
    ModelConfig,
    SpeechTransformer,
    TokenizerSpec,
    init_parameters,
    preset_config,
)
from .textnorm import NormalizationConfig, IDENTITY, PUNCTUATION_FILTER
from .training import Checkpoint, TrainConfig, TrainResult, evaluate_many, train

__all__ = [
    "CorpusTriple",
    "ExperimentPlan",
    "ExperimentRow",
    "ExperimentReport",
    "AlphabetMismatch",
    "PlanError",
    "load_plan",
    "build_tokenizer",
    "direct_finetune",
    "multistage_finetune",
    "run_matrix",
    "render_chart",
]

ROW_ORDER = ("zeroshot", "intermediate", "dtf", "mtf")

_TRAIN_KEYS = (
    "batch_size",
    "grad_accumulation",
    "peak_lr",
    "warmup_steps",
    "total_steps",
    "eval_every",
    "lr_decay",
)


class PlanError(AsrlabError):
    pass


class AlphabetMismatch(AsrlabError):
    pass


@dataclass
class CorpusTriple:
    train: Manifest
    val: Manifest
    test: Manifest | None = None

    def texts(self) -> list[str]:
        texts = [r.text for r in self.train.records]
        texts.extend(r.text for r in self.val.records)
        return texts


@dataclass
class ExperimentPlan:
    seed: int
    target: CorpusTriple
    target_train: TrainConfig
    intermediate: CorpusTriple | None = None
    intermediate_train: TrainConfig | None = None
    normalizations: tuple[NormalizationConfig, ...] = (IDENTITY, PUNCTUATION_FILTER)
    eval_unit: str = "grapheme"
    model_preset: str = "toy"
    model_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.target.test is None:
            raise PlanError("the target triple must include a test manifest")
        if (self.intermediate is None) != (self.intermediate_train is None):
            raise PlanError("intermediate corpus and training config come as a pair")
        if not self.normalizations:
            raise PlanError("at least one normalization is required")


def load_plan(path: str | Path) -> ExperimentPlan:
    """Read a YAML plan; manifest paths resolve relative to the plan file."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise PlanError(f"{path}: invalid YAML ({exc})") from exc
    if not isinstance(raw, dict):
        raise PlanError(f"{path}: expected a mapping at the top level")
    base = path.parent

    experiment = raw.get("experiment", {})
    seed = int(experiment.get("seed", 0))
    norm_names = experiment.get("normalizations", ["none", PUNCTUATION_FILTER.to_string()])
    try:
        normalizations = tuple(NormalizationConfig.from_string(n) for n in norm_names)
    except ValueError as exc:
        raise PlanError(f"{path}: {exc}") from exc
    eval_unit = experiment.get("eval_unit", "grapheme")

    model_section = dict(raw.get("model", {}))
    preset = model_section.pop("preset", "toy")

    def load_triple(section: dict, name: str, need_test: bool) -> CorpusTriple:
        for key in ("train", "val"):
            if key not in section:
                raise PlanError(f"{path}: section {name!r} is missing {key!r}")
        if need_test and "test" not in section:
            raise PlanError(f"{path}: section {name!r} is missing 'test'")
        test = read_manifest(base / section["test"]) if "test" in section else None
        return CorpusTriple(
            train=read_manifest(base / section["train"]),
            val=read_manifest(base / section["val"]),
            test=test,
        )

    def load_train_config(section: dict) -> TrainConfig:
        kwargs = {k: section[k] for k in _TRAIN_KEYS if k in section}
        try:
            return TrainConfig(seed=seed, **kwargs)
        except (TypeError, ValueError) as exc:
            raise PlanError(f"{path}: bad training config ({exc})") from exc

    if "target" not in raw:
        raise PlanError(f"{path}: a 'target' section is required")
    target = load_triple(raw["target"], "target", need_test=True)
    target_train = load_train_config(raw["target"])

    intermediate = None
    intermediate_train = None
    if "intermediate" in raw:
        intermediate = load_triple(raw["intermediate"], "intermediate", need_test=False)
        intermediate_train = load_train_config(raw["intermediate"])

    return ExperimentPlan(
        seed=seed,
        target=target,
        target_train=target_train,
        intermediate=intermediate,
        intermediate_train=intermediate_train,
        normalizations=normalizations,
        eval_unit=eval_unit,
        model_preset=preset,
        model_overrides=model_section,
    )


def build_tokenizer(plan: ExperimentPlan) -> TokenizerSpec:
    """One tokenizer over the union of all training-side transcripts.

    Built once, before any stage runs, from target plus intermediate
    train/validation texts; test transcripts stay held out.
    """
    texts = plan.target.texts()
    if plan.intermediate is not None:
        texts.extend(plan.intermediate.texts())
    return TokenizerSpec.from_texts(texts)


def _build_model_config(plan: ExperimentPlan, vocab_size: int) -> ModelConfig:
    config = preset_config(plan.model_preset, vocab_size=vocab_size)
    overrides = dict(plan.model_overrides)
    overrides["vocab_size"] = vocab_size
    return replace(config, **overrides)


def direct_finetune(
    base: Checkpoint | tuple[ModelConfig, TokenizerSpec],
    target: CorpusTriple,
    config: TrainConfig,
) -> TrainResult:
    """Fine-tune straight on the target corpus."""
    return train(base, target.train, target.val, config)


def multistage_finetune(
    base: Checkpoint | tuple[ModelConfig, TokenizerSpec],
    intermediate: CorpusTriple,
    target: CorpusTriple,
    intermediate_config: TrainConfig,
    target_config: TrainConfig,
) -> tuple[TrainResult, TrainResult]:
    """Intermediate stage first, then the target stage from its best state.

    The second stage starts a fresh schedule initialized bit-for-bit from
    the first stage's best checkpoint weights. Raises AlphabetMismatch when
    the tokenizer in play cannot spell the corpora involved.
    """
    tokenizer = base.tokenizer if isinstance(base, Checkpoint) else base[1]
    missing = _missing_units(tokenizer, intermediate, target)
    if missing:
        raise AlphabetMismatch(
            f"tokenizer lacks {len(missing)} graphemes needed by the corpora: "
            f"{sorted(missing)[:8]}"
        )
    stage1 = train(base, intermediate.train, intermediate.val, intermediate_config)
    stage2 = train(stage1.best, target.train, target.val, target_config)
    return stage1, stage2


def _missing_units(
    tokenizer: TokenizerSpec, *triples: CorpusTriple | None
) -> set[str]:
    from .textnorm import graphemes

    known = set(tokenizer.alphabet)
    missing: set[str] = set()
    for triple in triples:
        if triple is None:
            continue
        for text in triple.texts():
            missing.update(g for g in graphemes(text) if g not in known)
    return missing


@dataclass
class ExperimentRow:
    name: str
    status: str  # "ok" | "skipped" | "failed"
    reason: str = ""
    metrics: dict[str, dict[str, float]] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    wall_clock_seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "status": self.status,
            "reason": self.reason,
            "metrics": self.metrics,
            "provenance": self.provenance,
            "wall_clock_seconds": self.wall_clock_seconds,
        }


@dataclass
class ExperimentReport:
    rows: list[ExperimentRow]
    plan_summary: dict

    def row(self, name: str) -> ExperimentRow:
        for row in self.rows:
            if row.name == name:
                return row
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"plan": self.plan_summary, "rows": [r.to_dict() for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentReport":
        rows = [
            ExperimentRow(
                name=r["name"],
                status=r["status"],
                reason=r.get("reason", ""),
                metrics=r.get("metrics", {}),
                provenance=r.get("provenance", {}),
                wall_clock_seconds=r.get("wall_clock_seconds", 0.0),
            )
            for r in data["rows"]
        ]
        return cls(rows=rows, plan_summary=data.get("plan", {}))

    def to_table(self) -> str:
        norm_names: list[str] = []
        for row in self.rows:
            for name in row.metrics:
                if name not in norm_names:
                    norm_names.append(name)
        lines = []
        for norm_name in norm_names:
            lines.append(f"normalization: {norm_name}")
            lines.append(f"  {'arm':<14} {'wer':>8} {'cer':>8}  status")
            for row in self.rows:
                cell = row.metrics.get(norm_name)
                if cell is None:
                    detail = row.reason or row.status
                    lines.append(f"  {row.name:<14} {'-':>8} {'-':>8}  {detail}")
                else:
                    lines.append(
                        f"  {row.name:<14} {cell['wer']:>8.4f} {cell['cer']:>8.4f}  {row.status}"
                    )
            lines.append("")
        return "\n".join(lines)


def _eval_metrics(
    checkpoint: Checkpoint, plan: ExperimentPlan
) -> dict[str, dict[str, float]]:
    reports: dict[str, EvalReport] = evaluate_many(
        checkpoint, plan.target.test, plan.normalizations, plan.eval_unit
    )
    return {
        name: {"wer": report.pooled_wer, "cer": report.pooled_cer}
        for name, report in reports.items()
    }


def run_matrix(plan: ExperimentPlan) -> ExperimentReport:
    """Run every arm of the comparison matrix, tolerating per-arm failures."""
    tokenizer = build_tokenizer(plan)
    model_config = _build_model_config(plan, tokenizer.vocab_size)
    fresh = (model_config, tokenizer)

    rows = {name: ExperimentRow(name=name, status="skipped") for name in ROW_ORDER}

    def finish(name: str, started: float, checkpoint: Checkpoint, provenance: dict) -> None:
        row = rows[name]
        row.metrics = _eval_metrics(checkpoint, plan)
        row.status = "ok"
        row.provenance = provenance
        row.wall_clock_seconds = time.perf_counter() - started

    def fail(name: str, started: float, exc: Exception) -> None:
        row = rows[name]
        row.status = "failed"
        row.reason = str(exc)
        row.wall_clock_seconds = time.perf_counter() - started

    started = time.perf_counter()
    try:
        model = init_parameters(SpeechTransformer(model_config), plan.seed)
        zeroshot = Checkpoint.from_model(model, tokenizer, step=0)
        finish(
            "zeroshot",
            started,
            zeroshot,
            {"init": "random", "seed": plan.seed, "trained_steps": 0},
        )
    except AsrlabError as exc:
        fail("zeroshot", started, exc)

    stage1: TrainResult | None = None
    if plan.intermediate is None:
        rows["intermediate"].reason = "no intermediate corpus configured"
        rows["mtf"].reason = "no intermediate corpus configured"
    else:
        started = time.perf_counter()
        try:
            stage1 = train(
                fresh, plan.intermediate.train, plan.intermediate.val, plan.intermediate_train
            )
            finish(
                "intermediate",
                started,
                stage1.best,
                {
                    "init": "random",
                    "seed": plan.seed,
                    "trained_steps": plan.intermediate_train.total_steps,
                    "best_step": stage1.best.step,
                    "checkpoint_hash": stage1.best.parameter_hash(),
                },
            )
        except AsrlabError as exc:
            fail("intermediate", started, exc)

    started = time.perf_counter()
    try:
        dtf = direct_finetune(fresh, plan.target, plan.target_train)
        finish(
            "dtf",
            started,
            dtf.best,
            {
                "init": "random",
                "seed": plan.seed,
                "trained_steps": plan.target_train.total_steps,
                "best_step": dtf.best.step,
            },
        )
    except AsrlabError as exc:
        fail("dtf", started, exc)

    if plan.intermediate is not None:
        started = time.perf_counter()
        if stage1 is None:
            rows["mtf"].status = "failed"
            rows["mtf"].reason = "intermediate stage failed"
        else:
            try:
                init_hash = stage1.best.parameter_hash()
                rebuilt = Checkpoint.from_model(
                    stage1.best.build_model(), tokenizer, step=stage1.best.step
                )
                if rebuilt.parameter_hash() != init_hash:
                    raise AsrlabError("stage-2 initialization drifted from the stage-1 best")
                stage2 = train(
                    stage1.best, plan.target.train, plan.target.val, plan.target_train
                )
                finish(
                    "mtf",
                    started,
                    stage2.best,
                    {
                        "init": "intermediate-best",
                        "init_hash": init_hash,
                        "seed": plan.seed,
                        "trained_steps": plan.target_train.total_steps,
                        "best_step": stage2.best.step,
                    },
                )
            except AsrlabError as exc:
                fail("mtf", started, exc)

    plan_summary = {
        "seed": plan.seed,
        "model_preset": plan.model_preset,
        "eval_unit": plan.eval_unit,
        "normalizations": [n.to_string() for n in plan.normalizations],
        "target_records": {
            "train": len(plan.target.train.records),
            "val": len(plan.target.val.records),
            "test": len(plan.target.test.records),
        },
        "intermediate_records": None
        if plan.intermediate is None
        else {
            "train": len(plan.intermediate.train.records),
            "val": len(plan.intermediate.val.records),
        },
        "target_total_steps": plan.target_train.total_steps,
        "intermediate_total_steps": None
        if plan.intermediate_train is None
        else plan.intermediate_train.total_steps,
        "vocab_size": tokenizer.vocab_size,
    }
    return ExperimentReport(rows=[rows[name] for name in ROW_ORDER], plan_summary=plan_summary)


def render_chart(report: ExperimentReport, out_path: str | Path) -> None:
    """Grouped bar chart of WER per arm and normalization (SVG via Agg)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ok_rows = [r for r in report.rows if r.status == "ok" and r.metrics]
    norm_names: list[str] = []
    for row in ok_rows:
        for name in row.metrics:
            if name not in norm_names:
                norm_names.append(name)
    fig, ax = plt.subplots(figsize=(7, 4))
    if ok_rows and norm_names:
        import numpy as np

        x = np.arange(len(ok_rows), dtype=float)
        width = 0.8 / len(norm_names)
        for k, norm_name in enumerate(norm_names):
            values = [row.metrics.get(norm_name, {}).get("wer", float("nan")) for row in ok_rows]
            ax.bar(x + k * width, values, width, label=norm_name)
        ax.set_xticks(x + 0.4 - width / 2)
        ax.set_xticklabels([row.name for row in ok_rows])
        ax.legend(fontsize=8)
    ax.set_ylabel("word error rate")
    ax.set_title("target test WER by training arm")
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
