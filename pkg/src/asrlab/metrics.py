"""Edit-distance alignment and error-rate scoring, per utterance and pooled.

WER counts whitespace tokens, CER counts grapheme clusters (spaces included).
Corpus-level rates are pooled: total edit operations over total reference
units, so long utterances weigh more than short ones and rates can exceed
1.0 when hypotheses run long.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import AsrlabError
from .textnorm import NormalizationConfig, IDENTITY, graphemes, normalize, tokenize_words

__all__ = [
    "EditOp",
    "Alignment",
    "edit_distance",
    "wer",
    "cer",
    "corpus_eval",
    "UtteranceScore",
    "EvalReport",
    "EmptyReference",
    "AllReferencesEmpty",
]

MATCH = "match"
SUBSTITUTE = "substitute"
DELETE = "delete"
INSERT = "insert"


class EmptyReference(AsrlabError):
    """The normalized reference has no scoring units left."""


class AllReferencesEmpty(AsrlabError):
    """Every reference in a corpus normalized to nothing; rates are undefined."""


@dataclass(frozen=True)
class EditOp:
    kind: str
    ref_index: int | None
    hyp_index: int | None


@dataclass(frozen=True)
class Alignment:
    ops: tuple[EditOp, ...]
    matches: int
    substitutions: int
    deletions: int
    insertions: int

    @property
    def distance(self) -> int:
        return self.substitutions + self.deletions + self.insertions


def edit_distance(ref: Sequence, hyp: Sequence) -> Alignment:
    """Minimal unit-cost alignment between two sequences.

    Backtrace ties resolve in a fixed order (match/substitute, then delete,
    then insert) so equal-cost alignments are reported identically across
    runs and platforms.
    """
    n, m = len(ref), len(hyp)
    cost = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        cost[i][0] = i
    for j in range(1, m + 1):
        cost[0][j] = j
    for i in range(1, n + 1):
        row = cost[i]
        prev = cost[i - 1]
        ri = ref[i - 1]
        for j in range(1, m + 1):
            diag = prev[j - 1] + (0 if ri == hyp[j - 1] else 1)
            up = prev[j] + 1
            left = row[j - 1] + 1
            best = diag
            if up < best:
                best = up
            if left < best:
                best = left
            row[j] = best

    ops: list[EditOp] = []
    matches = subs = dels = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            same = ref[i - 1] == hyp[j - 1]
            if cost[i][j] == cost[i - 1][j - 1] + (0 if same else 1):
                if same:
                    ops.append(EditOp(MATCH, i - 1, j - 1))
                    matches += 1
                else:
                    ops.append(EditOp(SUBSTITUTE, i - 1, j - 1))
                    subs += 1
                i -= 1
                j -= 1
                continue
        if i > 0 and cost[i][j] == cost[i - 1][j] + 1:
            ops.append(EditOp(DELETE, i - 1, None))
            dels += 1
            i -= 1
        else:
            ops.append(EditOp(INSERT, None, j - 1))
            ins += 1
            j -= 1
    ops.reverse()
    return Alignment(tuple(ops), matches, subs, dels, ins)


def wer(ref: str, hyp: str, config: NormalizationConfig = IDENTITY) -> float:
    """Word error rate of one utterance after normalization."""
    ref_tokens = tokenize_words(normalize(ref, config))
    hyp_tokens = tokenize_words(normalize(hyp, config))
    if not ref_tokens:
        raise EmptyReference(f"reference normalizes to no words: {ref!r}")
    return edit_distance(ref_tokens, hyp_tokens).distance / len(ref_tokens)


def cer(
    ref: str,
    hyp: str,
    config: NormalizationConfig = IDENTITY,
    unit: str = "grapheme",
) -> float:
    """Character error rate over grapheme clusters (spaces count as units)."""
    ref_units = graphemes(normalize(ref, config), unit)
    hyp_units = graphemes(normalize(hyp, config), unit)
    if not ref_units:
        raise EmptyReference(f"reference normalizes to no graphemes: {ref!r}")
    return edit_distance(ref_units, hyp_units).distance / len(ref_units)


@dataclass(frozen=True)
class UtteranceScore:
    utterance_id: str
    wer: float
    cer: float
    ref_words: int
    ref_graphemes: int
    word_errors: int
    grapheme_errors: int


@dataclass
class EvalReport:
    per_utterance: list[UtteranceScore]
    pooled_wer: float
    pooled_cer: float
    normalization: NormalizationConfig
    totals: dict[str, int]
    excluded: list[tuple[str, str]] = field(default_factory=list)

    def to_records(self) -> list[dict]:
        records: list[dict] = []
        for row in self.per_utterance:
            records.append(
                {
                    "kind": "utterance",
                    "id": row.utterance_id,
                    "wer": row.wer,
                    "cer": row.cer,
                    "ref_words": row.ref_words,
                    "ref_graphemes": row.ref_graphemes,
                    "word_errors": row.word_errors,
                    "grapheme_errors": row.grapheme_errors,
                }
            )
        records.append(
            {
                "kind": "summary",
                "pooled_wer": self.pooled_wer,
                "pooled_cer": self.pooled_cer,
                "normalization": self.normalization.to_string(),
                "totals": dict(self.totals),
                "excluded": [list(item) for item in self.excluded],
            }
        )
        return records

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(r, ensure_ascii=False) for r in self.to_records()) + "\n"

    def to_table(self) -> str:
        header = f"{'id':<24} {'wer':>8} {'cer':>8} {'words':>6} {'graphemes':>10}"
        lines = [header, "-" * len(header)]
        for row in self.per_utterance:
            lines.append(
                f"{row.utterance_id:<24} {row.wer:>8.4f} {row.cer:>8.4f} "
                f"{row.ref_words:>6d} {row.ref_graphemes:>10d}"
            )
        lines.append("-" * len(header))
        lines.append(
            f"{'pooled':<24} {self.pooled_wer:>8.4f} {self.pooled_cer:>8.4f} "
            f"{self.totals['ref_words']:>6d} {self.totals['ref_graphemes']:>10d}"
        )
        for utt_id, reason in self.excluded:
            lines.append(f"excluded {utt_id}: {reason}")
        return "\n".join(lines) + "\n"


def corpus_eval(
    pairs: Iterable[tuple[str, str, str]],
    config: NormalizationConfig = IDENTITY,
    unit: str = "grapheme",
) -> EvalReport:
    """Score (id, reference, hypothesis) triples and pool the error counts.

    Utterances whose reference normalizes to nothing are reported in
    ``excluded`` and do not contribute to the pooled rates. The pooled rates
    are order-independent; per-utterance rows follow input order.
    """
    rows: list[UtteranceScore] = []
    excluded: list[tuple[str, str]] = []
    totals = {
        "word_matches": 0,
        "word_substitutions": 0,
        "word_deletions": 0,
        "word_insertions": 0,
        "ref_words": 0,
        "grapheme_matches": 0,
        "grapheme_substitutions": 0,
        "grapheme_deletions": 0,
        "grapheme_insertions": 0,
        "ref_graphemes": 0,
    }
    for utt_id, ref, hyp in pairs:
        norm_ref = normalize(ref, config)
        norm_hyp = normalize(hyp, config)
        ref_tokens = tokenize_words(norm_ref)
        ref_units = graphemes(norm_ref, unit)
        if not ref_tokens or not ref_units:
            excluded.append((utt_id, "reference empty after normalization"))
            continue
        word_align = edit_distance(ref_tokens, tokenize_words(norm_hyp))
        char_align = edit_distance(ref_units, graphemes(norm_hyp, unit))
        rows.append(
            UtteranceScore(
                utterance_id=utt_id,
                wer=word_align.distance / len(ref_tokens),
                cer=char_align.distance / len(ref_units),
                ref_words=len(ref_tokens),
                ref_graphemes=len(ref_units),
                word_errors=word_align.distance,
                grapheme_errors=char_align.distance,
            )
        )
        totals["word_matches"] += word_align.matches
        totals["word_substitutions"] += word_align.substitutions
        totals["word_deletions"] += word_align.deletions
        totals["word_insertions"] += word_align.insertions
        totals["ref_words"] += len(ref_tokens)
        totals["grapheme_matches"] += char_align.matches
        totals["grapheme_substitutions"] += char_align.substitutions
        totals["grapheme_deletions"] += char_align.deletions
        totals["grapheme_insertions"] += char_align.insertions
        totals["ref_graphemes"] += len(ref_units)

    if totals["ref_words"] == 0:
        raise AllReferencesEmpty("no reference survived normalization")

    word_errors = (
        totals["word_substitutions"] + totals["word_deletions"] + totals["word_insertions"]
    )
    grapheme_errors = (
        totals["grapheme_substitutions"]
        + totals["grapheme_deletions"]
        + totals["grapheme_insertions"]
    )
    return EvalReport(
        per_utterance=rows,
        pooled_wer=word_errors / totals["ref_words"],
        pooled_cer=grapheme_errors / totals["ref_graphemes"],
        normalization=config,
        totals=totals,
        excluded=excluded,
    )
