"""Deterministic training loop for the speech transformer.

Linear warmup then linear decay, hand-rolled Adam (so optimizer moments live
in the checkpoint format and resumes are exact), teacher-forced token NLL,
periodic greedy-decode validation scored by WER, best-checkpoint selection
with earliest-step tie-break. Batch composition is a pure function of
(seed, pass index), so runs with equal inputs produce bit-identical logs
and checkpoints.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .audio import read_wav
from .corpus import Manifest
from .errors import AsrlabError
from .features import MelConfig, MelSpectrogram, log_mel, pad_or_trim
from .metrics import EvalReport, corpus_eval
from .model import (
    ModelConfig,
    SpeechTransformer,
    TokenizerSpec,
    greedy_decode,
    init_parameters,
    sequence_loss,
)
from .textnorm import NormalizationConfig, IDENTITY

__all__ = [
    "TrainConfig",
    "lr_schedule",
    "Adam",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "TrainResult",
    "train",
    "evaluate",
    "evaluate_many",
    "NonFiniteLoss",
    "EmptyCorpus",
]

CHECKPOINT_MAGIC = b"LRCK"
CHECKPOINT_VERSION = 1


class NonFiniteLoss(AsrlabError):
    pass


class EmptyCorpus(AsrlabError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    grad_accumulation: int = 1
    peak_lr: float = 1e-5
    warmup_steps: int = 500
    total_steps: int = 2000
    eval_every: int = 250
    seed: int = 0
    lr_decay: str = "linear"
    eval_normalization: NormalizationConfig = IDENTITY

    def __post_init__(self):
        if self.batch_size < 1 or self.grad_accumulation < 1:
            raise ValueError("batch_size and grad_accumulation must be at least 1")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if not (1 <= self.warmup_steps <= self.total_steps):
            raise ValueError("need 1 <= warmup_steps <= total_steps")
        if self.eval_every < 1:
            raise ValueError("eval_every must be at least 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.lr_decay not in ("linear", "constant"):
            raise ValueError("lr_decay must be 'linear' or 'constant'")

    @classmethod
    def toy(cls, **overrides) -> "TrainConfig":
        """Desk-scale defaults: small batches, fast evals, from-scratch LR."""
        values = dict(
            batch_size=16,
            total_steps=1500,
            eval_every=100,
            peak_lr=1e-3,
            warmup_steps=100,
        )
        values.update(overrides)
        return cls(**values)


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Learning rate at a 1-based step: linear warmup, then linear decay to 0."""
    if not (1 <= step <= config.total_steps):
        raise ValueError(f"step {step} outside [1, {config.total_steps}]")
    if step <= config.warmup_steps:
        return config.peak_lr * step / config.warmup_steps
    if config.lr_decay == "constant":
        return config.peak_lr
    remaining = config.total_steps - step
    return config.peak_lr * remaining / (config.total_steps - config.warmup_steps)


class Adam:
    """Adam with bias correction, betas (0.9, 0.98), eps 1e-9.

    Implemented by hand so the first and second moments are plain named
    float32 arrays that serialize into the checkpoint format and make
    fine-tuning resumes exact. Matches torch.optim.Adam updates for the same
    hyperparameters (covered by tests).
    """

    BETA1 = 0.9
    BETA2 = 0.98
    EPS = 1e-9

    def __init__(self, model: SpeechTransformer):
        self.params = dict(model.named_parameters())
        self.m = {k: torch.zeros_like(p, dtype=torch.float32) for k, p in self.params.items()}
        self.v = {k: torch.zeros_like(p, dtype=torch.float32) for k, p in self.params.items()}
        self.steps = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def step(self, lr: float) -> None:
        self.steps += 1
        bias1 = 1.0 - self.BETA1**self.steps
        bias2 = 1.0 - self.BETA2**self.steps
        for name, p in self.params.items():
            if p.grad is None:
                continue
            grad = p.grad
            m = self.m[name]
            v = self.v[name]
            m.mul_(self.BETA1).add_(grad, alpha=1.0 - self.BETA1)
            v.mul_(self.BETA2).addcmul_(grad, grad, value=1.0 - self.BETA2)
            m_hat = m / bias1
            v_hat = v / bias2
            p.addcdiv_(m_hat, v_hat.sqrt().add_(self.EPS), value=-lr)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name in self.params:
            out[f"m.{name}"] = self.m[name].numpy().copy()
            out[f"v.{name}"] = self.v[name].numpy().copy()
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], steps: int) -> None:
        for name in self.params:
            self.m[name] = torch.from_numpy(arrays[f"m.{name}"].copy())
            self.v[name] = torch.from_numpy(arrays[f"v.{name}"].copy())
        self.steps = steps


@dataclass
class Checkpoint:
    model_config: ModelConfig
    tokenizer: TokenizerSpec
    arrays: dict[str, np.ndarray]
    opt_arrays: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    metric_history: list[dict] = field(default_factory=list)

    @classmethod
    def from_model(
        cls,
        model: SpeechTransformer,
        tokenizer: TokenizerSpec,
        optimizer: Adam | None = None,
        step: int = 0,
        metric_history: list[dict] | None = None,
    ) -> "Checkpoint":
        arrays = {
            name: tensor.detach().cpu().numpy().astype(np.float32, copy=True)
            for name, tensor in model.state_dict().items()
        }
        opt_arrays = optimizer.state_arrays() if optimizer is not None else {}
        return cls(
            model_config=model.config,
            tokenizer=tokenizer,
            arrays=arrays,
            opt_arrays=opt_arrays,
            step=step,
            metric_history=list(metric_history or []),
        )

    def build_model(self) -> SpeechTransformer:
        model = SpeechTransformer(self.model_config)
        state = {name: torch.from_numpy(a.copy()) for name, a in self.arrays.items()}
        model.load_state_dict(state, strict=True)
        return model

    def parameter_hash(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.arrays):
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(self.arrays[name]).tobytes())
        return digest.hexdigest()


def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> None:
    """Write magic, version, JSON header, then raw float32 arrays in order."""
    index = []
    blobs = []
    for kind, arrays in (("model", checkpoint.arrays), ("opt", checkpoint.opt_arrays)):
        for name in sorted(arrays):
            a = np.ascontiguousarray(arrays[name], dtype="<f4")
            index.append([kind, name, list(a.shape)])
            blobs.append(a.tobytes())
    header = {
        "model_config": checkpoint.model_config.to_dict(),
        "tokenizer": checkpoint.tokenizer.to_dict(),
        "step": checkpoint.step,
        "metric_history": checkpoint.metric_history,
        "has_optimizer_state": bool(checkpoint.opt_arrays),
        "index": index,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as handle:
        handle.write(CHECKPOINT_MAGIC)
        handle.write(struct.pack("<I", CHECKPOINT_VERSION))
        handle.write(struct.pack("<I", len(blob)))
        handle.write(blob)
        for raw in blobs:
            handle.write(raw)


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as handle:
        magic = handle.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise AsrlabError(f"{path}: not a checkpoint (bad magic {magic!r})")
        version = struct.unpack("<I", handle.read(4))[0]
        if version != CHECKPOINT_VERSION:
            raise AsrlabError(f"{path}: unsupported checkpoint version {version}")
        header_len = struct.unpack("<I", handle.read(4))[0]
        header = json.loads(handle.read(header_len).decode("utf-8"))
        arrays: dict[str, np.ndarray] = {}
        opt_arrays: dict[str, np.ndarray] = {}
        for kind, name, shape in header["index"]:
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(handle.read(4 * count), dtype="<f4").copy()
            target = arrays if kind == "model" else opt_arrays
            target[name] = data.reshape(shape)
    return Checkpoint(
        model_config=ModelConfig(**header["model_config"]),
        tokenizer=TokenizerSpec.from_dict(header["tokenizer"]),
        arrays=arrays,
        opt_arrays=opt_arrays,
        step=header["step"],
        metric_history=header["metric_history"],
    )


@dataclass
class _Prepared:
    ids: list[str]
    texts: list[str]
    mels: np.ndarray  # (count, n_mels, input_frames) float32
    frames: np.ndarray  # (count,) original frame counts before pad/trim
    tokens: list[list[int]]
    unk_tokens: int


def _model_input(mel: MelSpectrogram, config: ModelConfig) -> np.ndarray:
    x = pad_or_trim(mel, config.input_frames).values
    if config.standardize_input:
        x = (x - x.mean()) / max(float(x.std()), 1e-5)
    return x.astype(np.float32)


def _prepare(
    manifest: Manifest,
    tokenizer: TokenizerSpec,
    config: ModelConfig,
    mel_config: MelConfig = MelConfig(),
) -> _Prepared:
    ids, texts, mels, frames, tokens = [], [], [], [], []
    unk = 0
    for record in manifest.records:
        samples, _ = read_wav(manifest.audio_path(record))
        mel = log_mel(samples, mel_config)
        encoded = tokenizer.encode(record.text)
        unk += sum(1 for t in encoded if t == TokenizerSpec.UNK)
        full = [TokenizerSpec.BOS] + encoded + [TokenizerSpec.EOS]
        if len(full) > config.max_target_positions:
            raise AsrlabError(
                f"{record.id}: transcript needs {len(full)} target positions, "
                f"over the {config.max_target_positions} budget"
            )
        ids.append(record.id)
        texts.append(record.text)
        frames.append(mel.frames)
        mels.append(_model_input(mel, config))
        tokens.append(full)
    return _Prepared(
        ids=ids,
        texts=texts,
        mels=np.stack(mels) if mels else np.zeros((0, config.n_mels, config.input_frames), np.float32),
        frames=np.asarray(frames, dtype=np.int64),
        tokens=tokens,
        unk_tokens=unk,
    )


def batch_order(
    frame_counts: np.ndarray, batch_size: int, seed: int, pass_index: int
) -> list[np.ndarray]:
    """Batch composition for one pass: a pure function of (seed, pass index).

    A seeded permutation breaks ties, a stable sort by frame count groups
    similar lengths to keep padding waste down, and the resulting batches are
    shuffled so length order does not become curriculum order.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, pass_index)))
    count = len(frame_counts)
    perm = rng.permutation(count)
    order = perm[np.argsort(frame_counts[perm], kind="stable")]
    batches = [order[i : i + batch_size] for i in range(0, count, batch_size)]
    batch_perm = rng.permutation(len(batches))
    return [batches[i] for i in batch_perm]


def _pad_tokens(token_lists: list[list[int]]) -> torch.Tensor:
    width = max(len(t) for t in token_lists)
    out = np.full((len(token_lists), width), TokenizerSpec.PAD, dtype=np.int64)
    for row, tokens in enumerate(token_lists):
        out[row, : len(tokens)] = tokens
    return torch.from_numpy(out)


def _decode_indices(
    model: SpeechTransformer,
    tokenizer: TokenizerSpec,
    mels: np.ndarray,
    indices: list[int],
    batch_size: int,
) -> list[str]:
    hyps = []
    for lo in range(0, len(indices), batch_size):
        chunk = indices[lo : lo + batch_size]
        x = torch.from_numpy(mels[chunk])
        states = model.encode(x)
        for ids in greedy_decode(model, states):
            hyps.append(tokenizer.decode(ids))
    return hyps


def _decode_all(
    model: SpeechTransformer,
    tokenizer: TokenizerSpec,
    mels: np.ndarray,
    batch_size: int = 16,
    jobs: int = 1,
) -> list[str]:
    count = mels.shape[0]
    indices = list(range(count))
    if jobs <= 1 or count <= batch_size:
        return _decode_indices(model, tokenizer, mels, indices, batch_size)
    chunk_size = math.ceil(count / jobs)
    chunks = [indices[i : i + chunk_size] for i in range(0, count, chunk_size)]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        parts = list(pool.map(lambda c: _decode_indices(model, tokenizer, mels, c, batch_size), chunks))
    return [h for part in parts for h in part]


def _score(
    model: SpeechTransformer,
    tokenizer: TokenizerSpec,
    prepared: _Prepared,
    normalization: NormalizationConfig,
    unit: str,
    batch_size: int = 16,
    jobs: int = 1,
) -> EvalReport:
    was_training = model.training
    model.eval()
    hyps = _decode_all(model, tokenizer, prepared.mels, batch_size, jobs)
    if was_training:
        model.train()
    return corpus_eval(zip(prepared.ids, prepared.texts, hyps), normalization, unit)


def evaluate_many(
    checkpoint: Checkpoint,
    manifest: Manifest,
    normalizations,
    unit: str = "grapheme",
    batch_size: int = 16,
    jobs: int = 1,
) -> dict[str, EvalReport]:
    """Decode a manifest once, then score under several normalizations.

    Returns reports keyed by each normalization's textual form. Evaluation
    never mutates the checkpoint; the model is rebuilt from its arrays.
    """
    if not manifest.records:
        raise EmptyCorpus("cannot evaluate an empty manifest")
    model = checkpoint.build_model().eval()
    prepared = _prepare(manifest, checkpoint.tokenizer, checkpoint.model_config)
    hyps = _decode_all(model, checkpoint.tokenizer, prepared.mels, batch_size, jobs)
    pairs = list(zip(prepared.ids, prepared.texts, hyps))
    return {
        norm.to_string(): corpus_eval(pairs, norm, unit) for norm in normalizations
    }


def evaluate(
    checkpoint: Checkpoint,
    manifest: Manifest,
    normalization: NormalizationConfig = IDENTITY,
    unit: str = "grapheme",
    batch_size: int = 16,
    jobs: int = 1,
) -> EvalReport:
    """Greedy-decode a manifest with a checkpointed model and score it."""
    reports = evaluate_many(
        checkpoint, manifest, [normalization], unit, batch_size, jobs
    )
    return reports[normalization.to_string()]


@dataclass
class TrainResult:
    best: Checkpoint
    final: Checkpoint
    log: list[dict]


def train(
    init: Checkpoint | tuple[ModelConfig, TokenizerSpec],
    train_manifest: Manifest,
    val_manifest: Manifest,
    config: TrainConfig,
    log_path: str | Path | None = None,
    eval_unit: str = "grapheme",
    resume: bool = False,
) -> TrainResult:
    """Run the training loop; returns best/final checkpoints and the log.

    ``init`` is either a checkpoint or a (model config, tokenizer) pair for
    a seeded fresh initialization. A checkpoint by default seeds a new
    fine-tuning stage: weights carry over bit-for-bit, while the step count,
    schedule, optimizer moments, and metric history start fresh. With
    ``resume=True`` the run instead continues exactly where the checkpoint
    stopped: stored moments, step counter, and history are restored, and
    training proceeds to ``total_steps`` (resuming a finished run trains
    zero further steps and changes nothing).

    The best checkpoint minimizes validation WER, with the earliest step
    winning ties; the final checkpoint is the state after the last step.
    """
    if not train_manifest.records:
        raise EmptyCorpus("train manifest has no records")
    if not val_manifest.records:
        raise EmptyCorpus("validation manifest has no records")

    if isinstance(init, Checkpoint):
        model = init.build_model()
        tokenizer = init.tokenizer
        optimizer = Adam(model)
        if resume:
            if init.opt_arrays:
                optimizer.load_state_arrays(init.opt_arrays, init.step)
            else:
                optimizer.steps = init.step
            start_step = init.step
            history = [dict(h) for h in init.metric_history]
        else:
            start_step = 0
            history = []
    else:
        if resume:
            raise ValueError("resume=True needs a checkpoint, not a fresh initialization")
        model_config, tokenizer = init
        model = init_parameters(SpeechTransformer(model_config), config.seed)
        optimizer = Adam(model)
        start_step = 0
        history = []
    if start_step > config.total_steps:
        raise ValueError(
            f"checkpoint is at step {start_step}, beyond total_steps {config.total_steps}"
        )

    torch.manual_seed(config.seed)
    model.train()

    train_data = _prepare(train_manifest, tokenizer, model.config)
    val_data = _prepare(val_manifest, tokenizer, model.config)

    log: list[dict] = []
    log_file = open(log_path, "w", encoding="utf-8") if log_path is not None else None

    def emit(record: dict) -> None:
        log.append(record)
        if log_file is not None:
            log_file.write(json.dumps(record) + "\n")
            log_file.flush()

    try:
        if train_data.unk_tokens:
            emit({"kind": "warning", "unk_tokens": train_data.unk_tokens})

        batches_per_pass = math.ceil(len(train_data.tokens) / config.batch_size)
        cursor = start_step * config.grad_accumulation
        current_pass = -1
        batches: list[np.ndarray] = []

        best: Checkpoint | None = None
        best_wer = math.inf

        def snapshot(step: int) -> Checkpoint:
            return Checkpoint.from_model(model, tokenizer, optimizer, step, history)

        for step in range(start_step + 1, config.total_steps + 1):
            lr = lr_schedule(step, config)
            optimizer.zero_grad()
            losses = []
            for _ in range(config.grad_accumulation):
                pass_index, offset = divmod(cursor, batches_per_pass)
                if pass_index != current_pass:
                    batches = batch_order(
                        train_data.frames, config.batch_size, config.seed, pass_index
                    )
                    current_pass = pass_index
                batch_ids = batches[offset]
                cursor += 1
                x = torch.from_numpy(train_data.mels[batch_ids])
                toks = _pad_tokens([train_data.tokens[i] for i in batch_ids])
                inputs, targets = toks[:, :-1], toks[:, 1:]
                mask = targets != TokenizerSpec.PAD
                logits = model(x, inputs)
                loss = sequence_loss(logits, targets, mask)
                if not torch.isfinite(loss):
                    raise NonFiniteLoss(f"loss became non-finite at step {step} (lr {lr:.3e})")
                (loss / config.grad_accumulation).backward()
                losses.append(float(loss.item()))
            optimizer.step(lr)
            emit({"kind": "step", "step": step, "loss": sum(losses) / len(losses), "lr": lr})

            if step % config.eval_every == 0 or step == config.total_steps:
                report = _score(
                    model, tokenizer, val_data, config.eval_normalization, eval_unit
                )
                emit(
                    {
                        "kind": "eval",
                        "step": step,
                        "wer": report.pooled_wer,
                        "cer": report.pooled_cer,
                    }
                )
                history.append(
                    {"step": step, "wer": report.pooled_wer, "cer": report.pooled_cer}
                )
                if report.pooled_wer < best_wer:
                    best_wer = report.pooled_wer
                    best = snapshot(step)

        final = snapshot(config.total_steps)
        if best is None:
            best = final
    finally:
        if log_file is not None:
            log_file.close()
    return TrainResult(best=best, final=final, log=log)
