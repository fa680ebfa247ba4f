"""Manifest-based corpus management.

A manifest is a JSONL file: one header record describing the corpus followed
by one record per utterance. Utterance audio lives in WAV files referenced by
relative (or absolute) paths; nothing here touches audio content except
validation (existence) and segmentation (cutting long recordings).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .audio import read_wav, write_wav
from .errors import AsrlabError

__all__ = [
    "MAX_UTTERANCE_SECONDS",
    "REQUIRED_SAMPLE_RATE",
    "SPLIT_NAMES",
    "UtteranceRecord",
    "ManifestHeader",
    "Manifest",
    "SplitSpec",
    "Violation",
    "CorpusStats",
    "ParseError",
    "InfeasibleSplit",
    "BadBoundaries",
    "SegmentTooLong",
    "read_manifest",
    "write_manifest",
    "validate",
    "split",
    "stats",
    "format_duration",
    "segment_audio",
]

MAX_UTTERANCE_SECONDS = 30.0
REQUIRED_SAMPLE_RATE = 16000
MANIFEST_FORMAT_VERSION = 1
SPLIT_NAMES = ("train", "validation", "test")

_RECORD_FIELDS = ("id", "audio", "text", "duration", "sample_rate", "speaker", "split")


class ParseError(AsrlabError):
    pass


class InfeasibleSplit(AsrlabError):
    pass


class BadBoundaries(AsrlabError):
    pass


class SegmentTooLong(AsrlabError):
    def __init__(self, index: int, seconds: float):
        super().__init__(f"segment {index} is {seconds:.3f} s, over the {MAX_UTTERANCE_SECONDS} s cap")
        self.index = index
        self.seconds = seconds


@dataclass
class UtteranceRecord:
    id: str
    audio: str
    text: str
    duration: float
    sample_rate: int
    speaker: str | None = None
    split: str | None = None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "audio": self.audio,
            "text": self.text,
            "duration": self.duration,
            "sample_rate": self.sample_rate,
            "speaker": self.speaker,
            "split": self.split,
        }


@dataclass
class ManifestHeader:
    language: str = "und"
    script: str = "Latn"
    format_version: int = MANIFEST_FORMAT_VERSION

    def to_dict(self) -> dict:
        return {
            "language": self.language,
            "script": self.script,
            "format_version": self.format_version,
        }


@dataclass
class Manifest:
    header: ManifestHeader = field(default_factory=ManifestHeader)
    records: list[UtteranceRecord] = field(default_factory=list)
    base_dir: Path | None = None

    @property
    def total_seconds(self) -> float:
        return math.fsum(r.duration for r in self.records)

    def audio_path(self, record: UtteranceRecord) -> Path:
        path = Path(record.audio)
        if path.is_absolute() or self.base_dir is None:
            return path
        return self.base_dir / path

    def subset(self, ids: set[str]) -> "Manifest":
        kept = [r for r in self.records if r.id in ids]
        return Manifest(replace(self.header), kept, self.base_dir)


def read_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    stripped = [(i + 1, line) for i, line in enumerate(lines) if line.strip()]
    if not stripped:
        raise ParseError(f"{path}: empty manifest, expected a header line")

    def load(line_no: int, line: str) -> dict:
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{line_no}: invalid JSON ({exc})") from exc
        if not isinstance(obj, dict):
            raise ParseError(f"{path}:{line_no}: expected a JSON object")
        return obj

    head_no, head_line = stripped[0]
    head = load(head_no, head_line)
    for key in ("language", "script", "format_version"):
        if key not in head:
            raise ParseError(f"{path}:{head_no}: header is missing {key!r}")
    header = ManifestHeader(
        language=str(head["language"]),
        script=str(head["script"]),
        format_version=int(head["format_version"]),
    )

    records = []
    for line_no, line in stripped[1:]:
        obj = load(line_no, line)
        missing = [k for k in _RECORD_FIELDS if k not in obj]
        if missing:
            raise ParseError(f"{path}:{line_no}: record is missing fields {missing}")
        try:
            record = UtteranceRecord(
                id=str(obj["id"]),
                audio=str(obj["audio"]),
                text=str(obj["text"]),
                duration=float(obj["duration"]),
                sample_rate=int(obj["sample_rate"]),
                speaker=None if obj["speaker"] is None else str(obj["speaker"]),
                split=None if obj["split"] is None else str(obj["split"]),
            )
        except (TypeError, ValueError) as exc:
            raise ParseError(f"{path}:{line_no}: bad field value ({exc})") from exc
        if record.split is not None and record.split not in SPLIT_NAMES:
            raise ParseError(f"{path}:{line_no}: unknown split {record.split!r}")
        records.append(record)
    return Manifest(header, records, base_dir=path.parent)


def write_manifest(manifest: Manifest, path: str | Path) -> None:
    path = Path(path)
    lines = [json.dumps(manifest.header.to_dict(), ensure_ascii=False)]
    lines.extend(json.dumps(r.to_dict(), ensure_ascii=False) for r in manifest.records)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class Violation:
    kind: str
    record_id: str | None
    detail: str


def validate(manifest: Manifest) -> list[Violation]:
    """Check corpus constraints; an empty list means the manifest is clean.

    Kinds: MaxDurationExceeded, SampleRateMismatch, EmptyTranscript,
    MissingAudio, DuplicateId, BadDuration.
    """
    violations: list[Violation] = []
    seen: set[str] = set()
    for record in manifest.records:
        if record.id in seen:
            violations.append(Violation("DuplicateId", record.id, "id appears more than once"))
        seen.add(record.id)
        if record.duration > MAX_UTTERANCE_SECONDS:
            violations.append(
                Violation(
                    "MaxDurationExceeded",
                    record.id,
                    f"duration {record.duration:.3f} s exceeds {MAX_UTTERANCE_SECONDS} s",
                )
            )
        if record.duration <= 0 or not math.isfinite(record.duration):
            violations.append(
                Violation("BadDuration", record.id, f"duration {record.duration!r} is not positive")
            )
        if record.sample_rate != REQUIRED_SAMPLE_RATE:
            violations.append(
                Violation(
                    "SampleRateMismatch",
                    record.id,
                    f"sample rate {record.sample_rate}, expected {REQUIRED_SAMPLE_RATE}",
                )
            )
        if not record.text.strip():
            violations.append(Violation("EmptyTranscript", record.id, "transcript is empty"))
        if not manifest.audio_path(record).is_file():
            violations.append(
                Violation("MissingAudio", record.id, f"audio file not found: {record.audio}")
            )
    return violations


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float]
    seed: int = 0
    stratify_by_speaker: bool = False
    tolerance: float = 0.02

    def __post_init__(self):
        if len(self.ratios) != 3:
            raise ValueError("ratios must have exactly three entries (train/validation/test)")
        if any(r < 0 for r in self.ratios):
            raise ValueError("ratios must be non-negative")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError(f"ratios must sum to 1, got {sum(self.ratios)}")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


def split(manifest: Manifest, spec: SplitSpec) -> tuple[Manifest, Manifest, Manifest]:
    """Partition by duration into train/validation/test manifests.

    Assignment is seeded and deterministic: shuffle the assignment units
    (speaker groups when stratifying, else single records), greedily fill the
    split with the largest remaining duration deficit, then run a repair pass
    that moves whole units while any split's duration fraction deviates from
    its ratio by more than the tolerance. Raises InfeasibleSplit when no
    sequence of moves gets within tolerance.
    """
    records = manifest.records
    if not records:
        raise InfeasibleSplit("cannot split an empty manifest")
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise InfeasibleSplit("manifest has duplicate ids")
    if any(r.duration <= 0 for r in records):
        raise InfeasibleSplit("all durations must be positive")

    if spec.stratify_by_speaker:
        grouped: dict[str, list[int]] = {}
        for idx, record in enumerate(records):
            key = record.speaker if record.speaker is not None else f"\x00solo:{record.id}"
            grouped.setdefault(key, []).append(idx)
        groups = [grouped[k] for k in sorted(grouped)]
    else:
        groups = [[idx] for idx in range(len(records))]

    durations = [math.fsum(records[i].duration for i in g) for g in groups]
    total = math.fsum(durations)
    targets = [r * total for r in spec.ratios]
    open_splits = [k for k in range(3) if spec.ratios[k] > 0]

    rng = np.random.default_rng(spec.seed)
    order = rng.permutation(len(groups))

    assigned = [0.0, 0.0, 0.0]
    group_split = [0] * len(groups)
    for gi in order:
        deficits = [targets[k] - assigned[k] for k in open_splits]
        k = open_splits[int(np.argmax(deficits))]
        group_split[gi] = k
        assigned[k] += durations[gi]

    def worst_deviation(assigned_now: list[float]) -> float:
        return max(abs(assigned_now[k] / total - spec.ratios[k]) for k in range(3))

    for _ in range(10 * len(groups) + 100):
        current = worst_deviation(assigned)
        if current <= spec.tolerance:
            break
        best_move = None
        best_score = current
        for gi in range(len(groups)):
            src = group_split[gi]
            for dst in open_splits:
                if dst == src:
                    continue
                trial = list(assigned)
                trial[src] -= durations[gi]
                trial[dst] += durations[gi]
                score = worst_deviation(trial)
                if score < best_score - 1e-12:
                    best_score = score
                    best_move = (gi, dst)
        if best_move is None:
            raise InfeasibleSplit(
                f"no unit move improves the split; worst deviation {current:.4f} "
                f"exceeds tolerance {spec.tolerance}"
            )
        gi, dst = best_move
        assigned[group_split[gi]] -= durations[gi]
        assigned[dst] += durations[gi]
        group_split[gi] = dst

    if worst_deviation(assigned) > spec.tolerance:
        raise InfeasibleSplit(
            f"split did not converge within tolerance {spec.tolerance} "
            f"(worst deviation {worst_deviation(assigned):.4f})"
        )

    buckets: list[list[int]] = [[], [], []]
    for gi, group in enumerate(groups):
        buckets[group_split[gi]].extend(group)
    outputs = []
    for k in range(3):
        name = SPLIT_NAMES[k]
        kept = [replace(records[idx], split=name) for idx in sorted(buckets[k])]
        outputs.append(Manifest(replace(manifest.header), kept, manifest.base_dir))
    return outputs[0], outputs[1], outputs[2]


@dataclass(frozen=True)
class CorpusStats:
    utterance_count: int
    total_seconds: float
    total_formatted: str
    min_seconds: float
    max_seconds: float
    mean_seconds: float
    per_speaker: dict[str, float]
    per_split: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "utterance_count": self.utterance_count,
            "total_seconds": self.total_seconds,
            "total_formatted": self.total_formatted,
            "min_seconds": self.min_seconds,
            "max_seconds": self.max_seconds,
            "mean_seconds": self.mean_seconds,
            "per_speaker": dict(self.per_speaker),
            "per_split": dict(self.per_split),
        }


def format_duration(seconds: float) -> str:
    """Render seconds as H:MM:SS, keeping fractional seconds when present."""
    hours = int(seconds // 3600)
    minutes = int((seconds - 3600 * hours) // 60)
    rest = seconds - 3600 * hours - 60 * minutes
    if abs(rest - round(rest)) < 1e-9:
        return f"{hours}:{minutes:02d}:{int(round(rest)):02d}"
    return f"{hours}:{minutes:02d}:{rest:06.3f}"


def stats(manifest: Manifest) -> CorpusStats:
    """Duration statistics; totals accumulate exactly via math.fsum."""
    durations = [r.duration for r in manifest.records]
    total = math.fsum(durations)
    per_speaker: dict[str, list[float]] = {}
    per_split: dict[str, list[float]] = {}
    for record in manifest.records:
        per_speaker.setdefault(record.speaker or "(none)", []).append(record.duration)
        per_split.setdefault(record.split or "(unassigned)", []).append(record.duration)
    return CorpusStats(
        utterance_count=len(durations),
        total_seconds=total,
        total_formatted=format_duration(total),
        min_seconds=min(durations) if durations else 0.0,
        max_seconds=max(durations) if durations else 0.0,
        mean_seconds=total / len(durations) if durations else 0.0,
        per_speaker={k: math.fsum(v) for k, v in sorted(per_speaker.items())},
        per_split={k: math.fsum(v) for k, v in sorted(per_split.items())},
    )


def segment_audio(
    audio_path: str | Path,
    boundaries: list[float],
    out_dir: str | Path,
    base_id: str | None = None,
) -> tuple[list[Path], list[UtteranceRecord]]:
    """Cut one long recording at the given boundary times (seconds).

    Boundaries must be strictly increasing and strictly inside the recording.
    Cut points land on sample indices via floor(time * rate). Every produced
    segment must fit the duration cap; nothing is written otherwise. The
    returned records are drafts: transcripts are empty and splits unassigned.
    """
    audio_path = Path(audio_path)
    out_dir = Path(out_dir)
    samples, rate = read_wav(audio_path)
    n = len(samples)
    duration = n / rate

    cuts = [0]
    for b in boundaries:
        if not (0.0 < b < duration):
            raise BadBoundaries(f"boundary {b} s is outside (0, {duration:.3f})")
        cuts.append(int(math.floor(b * rate)))
    cuts.append(n)
    for a, b in zip(cuts, cuts[1:]):
        if b <= a:
            raise BadBoundaries("boundaries must be strictly increasing and at least one sample apart")

    max_samples = int(MAX_UTTERANCE_SECONDS * rate)
    for index, (a, b) in enumerate(zip(cuts, cuts[1:])):
        if b - a > max_samples:
            raise SegmentTooLong(index, (b - a) / rate)

    base = base_id if base_id is not None else audio_path.stem
    out_dir.mkdir(parents=True, exist_ok=True)
    paths: list[Path] = []
    records: list[UtteranceRecord] = []
    for index, (a, b) in enumerate(zip(cuts, cuts[1:])):
        name = f"{base}_{index:03d}"
        path = out_dir / f"{name}.wav"
        write_wav(path, samples[a:b], rate)
        paths.append(path)
        records.append(
            UtteranceRecord(
                id=name,
                audio=path.name,
                text="",
                duration=(b - a) / rate,
                sample_rate=rate,
            )
        )
    return paths, records
