import json
import math

import numpy as np
import pytest

from asrlab.audio import AudioFormatError, read_wav, write_wav
from asrlab.corpus import (
    InfeasibleSplit,
    Manifest,
    ManifestHeader,
    ParseError,
    SplitSpec,
    UtteranceRecord,
    format_duration,
    read_manifest,
    segment_audio,
    split,
    stats,
    validate,
    write_manifest,
)


def make_record(i, duration=2.0, speaker=None, text="hello there"):
    return UtteranceRecord(
        id=f"utt-{i:04d}",
        audio=f"audio/utt-{i:04d}.wav",
        text=text,
        duration=duration,
        sample_rate=16000,
        speaker=speaker or f"spk-{i % 5}",
        split=None,
    )


def write_audio_for(manifest, tmp_path):
    for record in manifest.records:
        path = tmp_path / record.audio
        path.parent.mkdir(parents=True, exist_ok=True)
        n = int(record.duration * 16000)
        write_wav(path, np.zeros(n), 16000)


@pytest.fixture
def manifest(tmp_path):
    header = ManifestHeader(language="tst", script="Latn")
    records = [make_record(i, duration=1.0 + 0.25 * (i % 7)) for i in range(40)]
    m = Manifest(header, records, tmp_path)
    write_audio_for(m, tmp_path)
    return m


def test_manifest_round_trip(manifest, tmp_path):
    path = tmp_path / "corpus.jsonl"
    write_manifest(manifest, path)
    loaded = read_manifest(path)
    assert loaded.header == manifest.header
    assert loaded.records == manifest.records
    assert loaded.base_dir == tmp_path


def test_read_manifest_reports_line_numbers(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(
        '{"language": "tst", "script": "Latn", "format_version": 1}\n'
        '{"id": "a", "audio": "a.wav", "text": "x", "duration": 1.0, '
        '"sample_rate": 16000, "speaker": "s", "split": null}\n'
        "{not json}\n"
    )
    with pytest.raises(ParseError) as err:
        read_manifest(path)
    assert ":3:" in str(err.value)


def test_read_manifest_missing_field(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(
        '{"language": "tst", "script": "Latn", "format_version": 1}\n'
        '{"id": "a", "audio": "a.wav", "duration": 1.0}\n'
    )
    with pytest.raises(ParseError):
        read_manifest(path)


def test_validate_clean_manifest(manifest):
    assert validate(manifest) == []


def test_validate_catches_each_violation(manifest, tmp_path):
    from dataclasses import replace

    records = list(manifest.records)
    records[0] = replace(records[0], id=records[1].id)
    records[2] = replace(records[2], duration=31.0)
    records[3] = replace(records[3], duration=-1.0)
    records[4] = replace(records[4], sample_rate=8000)
    records[5] = replace(records[5], text="   ")
    records[6] = replace(records[6], audio="missing.wav")
    bad = Manifest(manifest.header, records, tmp_path)
    kinds = {v.kind for v in validate(bad)}
    assert kinds == {
        "DuplicateId",
        "MaxDurationExceeded",
        "BadDuration",
        "SampleRateMismatch",
        "EmptyTranscript",
        "MissingAudio",
    }


def test_split_ratios_within_tolerance(manifest):
    import math as m

    spec = SplitSpec(ratios=(0.7, 0.1, 0.2), seed=3)
    parts = split(manifest, spec)
    total = m.fsum(r.duration for r in manifest.records)
    for part, ratio, name in zip(parts, spec.ratios, ("train", "validation", "test")):
        got = m.fsum(r.duration for r in part.records) / total
        assert abs(got - ratio) <= spec.tolerance + 1e-9
        assert all(r.split == name for r in part.records)
    # every record lands in exactly one split
    all_ids = sorted(r.id for part in parts for r in part.records)
    assert all_ids == sorted(r.id for r in manifest.records)


def test_split_deterministic(manifest):
    spec = SplitSpec(ratios=(0.8, 0.0, 0.2), seed=11)
    a = split(manifest, spec)
    b = split(manifest, spec)
    for part_a, part_b in zip(a, b):
        assert [r.id for r in part_a.records] == [r.id for r in part_b.records]
    # a zero ratio gets nothing
    assert a[1].records == []


def test_split_stratified_keeps_speakers_whole(manifest):
    spec = SplitSpec(ratios=(0.6, 0.2, 0.2), seed=1, stratify_by_speaker=True, tolerance=0.15)
    parts = split(manifest, spec)
    speaker_splits = {}
    for part in parts:
        for r in part.records:
            speaker_splits.setdefault(r.speaker, set()).add(r.split)
    assert all(len(v) == 1 for v in speaker_splits.values())


def test_split_infeasible(tmp_path):
    header = ManifestHeader(language="tst", script="Latn")
    # one speaker cannot be split three ways when stratifying
    records = [make_record(i, speaker="only") for i in range(9)]
    m = Manifest(header, records, tmp_path)
    spec = SplitSpec(ratios=(0.34, 0.33, 0.33), seed=0, stratify_by_speaker=True)
    with pytest.raises(InfeasibleSplit):
        split(m, spec)


def test_split_rejects_bad_ratios():
    with pytest.raises(ValueError):
        SplitSpec(ratios=(0.5, 0.4, 0.0))
    with pytest.raises(ValueError):
        SplitSpec(ratios=(0.5, 0.5))


def test_stats_sums_durations(manifest):
    s = stats(manifest)
    assert s.utterance_count == 40
    assert s.total_seconds == pytest.approx(math.fsum(r.duration for r in manifest.records))
    assert len(s.per_speaker) == 5


def test_format_duration():
    assert format_duration(3600.0) == "1:00:00"
    assert format_duration(61.0) == "0:01:01"
    assert format_duration(0.4) == "0:00:00.400"


def test_segment_audio(tmp_path):
    rate = 16000
    samples = np.sin(2 * np.pi * 440 * np.arange(rate * 3) / rate) * 0.1
    src = tmp_path / "long.wav"
    write_wav(src, samples, rate)
    paths, drafts = segment_audio(src, [1.0, 2.5], tmp_path / "segs")
    assert len(drafts) == 3
    assert all(d.text == "" and d.split is None for d in drafts)
    assert all(p.exists() for p in paths)
    first, _ = read_wav(paths[0])
    assert len(first) == rate
    assert drafts[1].duration == pytest.approx(1.5)
    assert drafts[2].duration == pytest.approx(0.5)


def test_segment_audio_rejects_bad_boundaries(tmp_path):
    rate = 16000
    write_wav(tmp_path / "x.wav", np.zeros(rate), rate)
    from asrlab.corpus import BadBoundaries

    with pytest.raises(BadBoundaries):
        segment_audio(tmp_path / "x.wav", [0.5, 0.25], tmp_path / "out")
    with pytest.raises(BadBoundaries):
        segment_audio(tmp_path / "x.wav", [2.0], tmp_path / "out")


def test_wav_round_trip(tmp_path):
    samples = np.linspace(-0.5, 0.5, 321)
    path = tmp_path / "t.wav"
    write_wav(path, samples, 16000)
    back, rate = read_wav(path)
    assert rate == 16000
    assert np.max(np.abs(back - samples)) < 1 / 32767


def test_read_wav_rejects_non_wav(tmp_path):
    path = tmp_path / "t.wav"
    path.write_bytes(b"not a wav file")
    with pytest.raises(AudioFormatError):
        read_wav(path)
