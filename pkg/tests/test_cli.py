import json
from pathlib import Path

import numpy as np
import pytest

from asrlab.cli import main
from asrlab.corpus import read_manifest, validate, write_wav


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture(scope="module")
def cli_corpus(tmp_path_factory):
    """A synthesized corpus with split manifests, generated through the CLI."""
    out = tmp_path_factory.mktemp("cli_corpus")
    code = main(
        [
            "synth",
            "gen",
            "--out-dir",
            str(out),
            "--utterances",
            "20",
            "--seed",
            "6",
            "--vocab-size",
            "12",
            "--tag",
            "clitest",
            "--words",
            "1,2",
            "--split",
            "0.5,0.25,0.25",
        ]
    )
    assert code == 0
    return out


TRAIN_FLAGS = [
    "--batch-size", "4",
    "--peak-lr", "0.001",
    "--warmup-steps", "2",
    "--total-steps", "4",
    "--eval-every", "2",
    "--max-source-positions", "80",
    "--max-target-positions", "32",
]


@pytest.fixture(scope="module")
def trained_dir(cli_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_train")
    code = main(
        [
            "train",
            "--train", str(cli_corpus / "train.manifest.jsonl"),
            "--val", str(cli_corpus / "validation.manifest.jsonl"),
            "--out-dir", str(out),
            "--seed", "0",
            *TRAIN_FLAGS,
        ]
    )
    assert code == 0
    return out


def test_synth_gen_writes_corpus_and_lexicon(cli_corpus, capsys):
    assert (cli_corpus / "manifest.jsonl").exists()
    assert (cli_corpus / "lexicon.json").exists()
    for name in ("train", "validation", "test"):
        assert (cli_corpus / f"{name}.manifest.jsonl").exists()
    manifest = read_manifest(cli_corpus / "manifest.jsonl")
    assert len(manifest.records) == 20
    assert manifest.records[0].id.startswith("clitest-")


def test_synth_gen_overlap_needs_parent(tmp_path, capsys):
    code, out, err = run(
        capsys,
        "synth", "gen",
        "--out-dir", str(tmp_path / "x"),
        "--utterances", "2",
        "--overlap", "0.5",
    )
    assert code == 1
    assert "error:" in err


def test_synth_gen_derives_related_language(cli_corpus, tmp_path, capsys):
    code, out, err = run(
        capsys,
        "synth", "gen",
        "--out-dir", str(tmp_path / "related"),
        "--utterances", "4",
        "--seed", "8",
        "--tag", "cousin",
        "--parent-lexicon", str(cli_corpus / "lexicon.json"),
        "--overlap", "0.5",
        "--words", "1,2",
    )
    assert code == 0
    lexicon = json.loads((tmp_path / "related" / "lexicon.json").read_text())
    assert lexicon["language_tag"] == "cousin"
    assert lexicon["overlap_fraction"] == 0.5


def test_corpus_validate_ok(cli_corpus, capsys):
    code, out, err = run(capsys, "corpus", "validate", str(cli_corpus / "manifest.jsonl"))
    assert code == 0
    assert out.startswith("ok: 20 records")


def test_corpus_validate_reports_violations(cli_corpus, tmp_path, capsys):
    manifest = (cli_corpus / "manifest.jsonl").read_text(encoding="utf-8").splitlines()
    bad = tmp_path / "bad.jsonl"
    record = json.loads(manifest[1])
    record["audio"] = "no-such-file.wav"
    bad.write_text("\n".join([manifest[0], json.dumps(record)]) + "\n", encoding="utf-8")
    code, out, err = run(capsys, "corpus", "validate", str(bad))
    assert code == 1
    assert "violation(s)" in err


def test_corpus_validate_missing_file(capsys):
    code, out, err = run(capsys, "corpus", "validate", "/no/such/manifest.jsonl")
    assert code == 1
    assert "error:" in err


def test_corpus_stats_json(cli_corpus, capsys):
    code, out, err = run(capsys, "corpus", "stats", str(cli_corpus / "manifest.jsonl"), "--json")
    assert code == 0
    payload = json.loads(out)
    assert payload["utterance_count"] == 20
    assert payload["total_seconds"] > 0


def test_corpus_split_writes_rebased_manifests(cli_corpus, tmp_path, capsys):
    out_dir = tmp_path / "parts"
    code, out, err = run(
        capsys,
        "corpus", "split", str(cli_corpus / "manifest.jsonl"),
        "--ratios", "0.5,0.25,0.25",
        "--seed", "1",
        "--tolerance", "0.06",
        "--out-dir", str(out_dir),
    )
    assert code == 0
    total = 0
    for name in ("train", "validation", "test"):
        part = read_manifest(out_dir / f"{name}.manifest.jsonl")
        assert validate(part) == []
        total += len(part.records)
    assert total == 20


def test_corpus_segment_cli(tmp_path, capsys):
    wav = tmp_path / "long.wav"
    rng = np.random.default_rng(0)
    write_wav(wav, rng.normal(0, 0.1, 16000 * 2), 16000)
    out_dir = tmp_path / "segments"
    draft = tmp_path / "draft.jsonl"
    code, out, err = run(
        capsys,
        "corpus", "segment", str(wav),
        "--boundaries", "0.8,1.4",
        "--out-dir", str(out_dir),
        "--manifest", str(draft),
    )
    assert code == 0
    assert len(list(out_dir.glob("*.wav"))) == 3
    assert len(read_manifest(draft).records) == 3


def test_train_writes_artifacts(trained_dir):
    for name in ("best.ckpt", "final.ckpt", "train_log.jsonl", "resolved_config.json"):
        assert (trained_dir / name).exists()
    resolved = json.loads((trained_dir / "resolved_config.json").read_text())
    assert resolved["command"] == "train"
    assert resolved["train_config"]["total_steps"] == 4
    assert resolved["model_config"]["max_source_positions"] == 80


def test_train_config_file_merges_under_flags(cli_corpus, tmp_path, capsys):
    config = tmp_path / "train.yaml"
    config.write_text(
        "total_steps: 6\npeak_lr: 0.0005\nwarmup_steps: 2\nbatch_size: 4\neval_every: 3\n",
        encoding="utf-8",
    )
    out_dir = tmp_path / "merged"
    code, out, err = run(
        capsys,
        "train",
        "--train", str(cli_corpus / "train.manifest.jsonl"),
        "--val", str(cli_corpus / "validation.manifest.jsonl"),
        "--out-dir", str(out_dir),
        "--config", str(config),
        "--total-steps", "4",
        "--eval-every", "2",
        "--max-source-positions", "80",
        "--max-target-positions", "32",
    )
    assert code == 0
    resolved = json.loads((out_dir / "resolved_config.json").read_text())
    assert resolved["train_config"]["total_steps"] == 4
    assert resolved["train_config"]["peak_lr"] == 0.0005


def test_train_rejects_bad_config(cli_corpus, tmp_path, capsys):
    code, out, err = run(
        capsys,
        "train",
        "--train", str(cli_corpus / "train.manifest.jsonl"),
        "--val", str(cli_corpus / "validation.manifest.jsonl"),
        "--out-dir", str(tmp_path / "nope"),
        "--total-steps", "-1",
    )
    assert code == 1
    assert "error:" in err


def test_finetune_dtf_from_checkpoint(cli_corpus, trained_dir, tmp_path, capsys):
    out_dir = tmp_path / "dtf"
    code, out, err = run(
        capsys,
        "finetune", "dtf",
        "--base", str(trained_dir / "best.ckpt"),
        "--train", str(cli_corpus / "train.manifest.jsonl"),
        "--val", str(cli_corpus / "validation.manifest.jsonl"),
        "--out-dir", str(out_dir),
        "--seed", "0",
        "--batch-size", "4",
        "--peak-lr", "0.001",
        "--warmup-steps", "1",
        "--total-steps", "2",
        "--eval-every", "2",
    )
    assert code == 0
    assert (out_dir / "best.ckpt").exists()
    resolved = json.loads((out_dir / "resolved_config.json").read_text())
    assert resolved["base"].endswith("best.ckpt")


def test_finetune_mtf_fresh(cli_corpus, tmp_path, capsys):
    out_dir = tmp_path / "mtf"
    code, out, err = run(
        capsys,
        "finetune", "mtf",
        "--inter-train", str(cli_corpus / "train.manifest.jsonl"),
        "--inter-val", str(cli_corpus / "validation.manifest.jsonl"),
        "--train", str(cli_corpus / "train.manifest.jsonl"),
        "--val", str(cli_corpus / "validation.manifest.jsonl"),
        "--out-dir", str(out_dir),
        "--seed", "0",
        "--batch-size", "4",
        "--peak-lr", "0.001",
        "--warmup-steps", "1",
        "--total-steps", "2",
        "--eval-every", "2",
        "--inter-batch-size", "4",
        "--inter-peak-lr", "0.001",
        "--inter-warmup-steps", "1",
        "--inter-total-steps", "2",
        "--inter-eval-every", "2",
        "--max-source-positions", "80",
        "--max-target-positions", "32",
    )
    assert code == 0
    for name in ("stage1_best.ckpt", "best.ckpt", "final.ckpt"):
        assert (out_dir / name).exists()
    resolved = json.loads((out_dir / "resolved_config.json").read_text())
    assert resolved["stage1_config"]["total_steps"] == 2
    assert resolved["stage2_config"]["total_steps"] == 2


def test_eval_ref_hyp_pairs(tmp_path, capsys):
    pairs = tmp_path / "pairs.jsonl"
    pairs.write_text(
        json.dumps({"id": "a", "ref": "Hello, world!", "hyp": "hello world"})
        + "\n"
        + json.dumps({"ref": "same text", "hyp": "same text"})
        + "\n",
        encoding="utf-8",
    )
    report_path = tmp_path / "report.jsonl"
    code, out, err = run(
        capsys,
        "eval",
        "--ref-hyp", str(pairs),
        "--norm", "punctuation+symbols+whitespace+trim",
        "--json", str(report_path),
    )
    assert code == 0
    assert "wer" in out.lower()
    lines = [json.loads(l) for l in report_path.read_text().splitlines()]
    assert lines[-1]["kind"] == "summary"


def test_eval_ref_hyp_rejects_mixed_modes(tmp_path, capsys):
    pairs = tmp_path / "pairs.jsonl"
    pairs.write_text(json.dumps({"ref": "a", "hyp": "a"}) + "\n", encoding="utf-8")
    code, out, err = run(
        capsys,
        "eval", "--ref-hyp", str(pairs), "--checkpoint", "whatever.ckpt",
    )
    assert code == 1
    assert "error:" in err


def test_eval_checkpoint_on_manifest(cli_corpus, trained_dir, capsys):
    code, out, err = run(
        capsys,
        "eval",
        "--checkpoint", str(trained_dir / "best.ckpt"),
        "--manifest", str(cli_corpus / "test.manifest.jsonl"),
    )
    assert code == 0
    assert "wer" in out.lower()


def test_eval_bad_pairs_file(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"ref": "a"}\n', encoding="utf-8")
    code, out, err = run(capsys, "eval", "--ref-hyp", str(bad))
    assert code == 1
    assert "error:" in err


def test_experiment_run_and_report_render(cli_corpus, tmp_path, capsys):
    plan = tmp_path / "plan.yaml"
    plan.write_text(
        f"""
experiment:
  seed: 2
model:
  max_source_positions: 80
  max_target_positions: 32
target:
  train: {cli_corpus}/train.manifest.jsonl
  val: {cli_corpus}/validation.manifest.jsonl
  test: {cli_corpus}/test.manifest.jsonl
  batch_size: 4
  peak_lr: 0.001
  warmup_steps: 1
  total_steps: 2
  eval_every: 2
""",
        encoding="utf-8",
    )
    out_dir = tmp_path / "exp"
    code, out, err = run(
        capsys, "experiment", "run", str(plan), "--out-dir", str(out_dir), "--seed", "5"
    )
    assert code == 0
    assert (out_dir / "report.json").exists()
    assert (out_dir / "report.txt").exists()
    assert (out_dir / "report.svg").exists()
    payload = json.loads((out_dir / "report.json").read_text())
    assert payload["plan"]["seed"] == 5
    names = [row["name"] for row in payload["rows"]]
    assert names == ["zeroshot", "intermediate", "dtf", "mtf"]

    svg_out = tmp_path / "again.svg"
    code, out, err = run(
        capsys, "report", "render", str(out_dir / "report.json"), "--out", str(svg_out)
    )
    assert code == 0
    assert "<svg" in svg_out.read_text()


def test_argparse_usage_error_is_exit_code_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["corpus"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 2
