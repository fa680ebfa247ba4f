"""Synthetic tone languages with controllable lexical overlap.

Each phone is a pure sine carrier at a distinct frequency; a word is a short
phone sequence rendered as tone bursts with brief gaps; a word's written form
is an arbitrary short letter string, deliberately unrelated to its phones so
that nothing about the audio can be read off the spelling. Related languages
share an exact fraction of their lexicon with a parent, which is the knob the
transfer experiments turn.

The matched-filter decoder at the bottom is the learnability certificate: it
recovers transcripts from clean-ish audio with no learned parameters, using
only segmentation, a Fourier peak per burst, and lexicon lookup.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import write_wav
from .corpus import Manifest, ManifestHeader, UtteranceRecord
from .errors import AsrlabError
from .metrics import edit_distance

__all__ = [
    "SAMPLE_RATE",
    "WORD_ALPHABET",
    "Phone",
    "PhoneInventory",
    "Lexicon",
    "SynthConfig",
    "ExhaustedNamespace",
    "UtteranceTooLong",
    "gen_language",
    "derive_related",
    "render_words",
    "add_noise",
    "synth_corpus",
    "matched_filter_decode",
    "save_lexicon",
    "load_lexicon",
]

SAMPLE_RATE = 16000
TONE_AMPLITUDE = 0.3
FADE_SECONDS = 0.005
WORD_GAP_FACTOR = 3  # word boundary silence = factor * intra-word gap
MIN_WORD_PHONES = 2
MAX_WORD_PHONES = 5
MIN_TEXT_LEN = 3
MAX_TEXT_LEN = 6
WORD_ALPHABET = "abcdefghijklmnop"
PUNCTUATION_MARKS = (",", ".", "?", "!")


class ExhaustedNamespace(AsrlabError):
    pass


class UtteranceTooLong(AsrlabError):
    pass


@dataclass(frozen=True)
class Phone:
    symbol: str
    frequency_hz: float


@dataclass(frozen=True)
class PhoneInventory:
    phones: tuple[Phone, ...]
    min_spacing_hz: float = 120.0

    def __post_init__(self):
        symbols = [p.symbol for p in self.phones]
        if len(set(symbols)) != len(symbols):
            raise ValueError("phone symbols must be unique")
        freqs = sorted(p.frequency_hz for p in self.phones)
        if freqs and (freqs[0] <= 0 or freqs[-1] >= SAMPLE_RATE / 2):
            raise ValueError("carrier frequencies must sit inside (0, Nyquist)")
        for a, b in zip(freqs, freqs[1:]):
            if b - a < self.min_spacing_hz:
                raise ValueError(
                    f"carriers {a} Hz and {b} Hz are closer than {self.min_spacing_hz} Hz"
                )

    @classmethod
    def default(cls, n_phones: int = 18) -> "PhoneInventory":
        phones = tuple(
            Phone(symbol=f"p{i:02d}", frequency_hz=300.0 + 150.0 * i) for i in range(n_phones)
        )
        return cls(phones=phones)

    @property
    def symbols(self) -> tuple[str, ...]:
        return tuple(p.symbol for p in self.phones)

    def frequency_of(self, symbol: str) -> float:
        for p in self.phones:
            if p.symbol == symbol:
                return p.frequency_hz
        raise KeyError(symbol)

    def nearest_symbol(self, frequency_hz: float) -> str:
        best = min(self.phones, key=lambda p: (abs(p.frequency_hz - frequency_hz), p.symbol))
        return best.symbol


@dataclass
class Lexicon:
    language_tag: str
    words: dict[str, tuple[str, ...]]  # written form -> phone sequence
    inventory: PhoneInventory
    parent_tag: str | None = None
    overlap_fraction: float | None = None

    def phone_sequences(self) -> set[tuple[str, ...]]:
        return set(self.words.values())


def _sequence_namespace(n_phones: int) -> int:
    return sum(n_phones**length for length in range(MIN_WORD_PHONES, MAX_WORD_PHONES + 1))


def _text_namespace() -> int:
    base = len(WORD_ALPHABET)
    return sum(base**length for length in range(MIN_TEXT_LEN, MAX_TEXT_LEN + 1))


def _draw_sequence(rng: np.random.Generator, symbols: tuple[str, ...]) -> tuple[str, ...]:
    length = int(rng.integers(MIN_WORD_PHONES, MAX_WORD_PHONES + 1))
    return tuple(symbols[int(i)] for i in rng.integers(0, len(symbols), length))

def _draw_text(rng: np.random.Generator) -> str:
    length = int(rng.integers(MIN_TEXT_LEN, MAX_TEXT_LEN + 1))
    return "".join(WORD_ALPHABET[int(i)] for i in rng.integers(0, len(WORD_ALPHABET), length))


def _fill_words(
    rng: np.random.Generator,
    inventory: PhoneInventory,
    count: int,
    taken_sequences: set[tuple[str, ...]],
    taken_texts: set[str],
) -> dict[str, tuple[str, ...]]:
    headroom = _sequence_namespace(len(inventory.phones)) - len(taken_sequences)
    if count > headroom or count > _text_namespace() - len(taken_texts):
        raise ExhaustedNamespace(
            f"cannot mint {count} new words: namespace leaves only {headroom} sequences"
        )
    words: dict[str, tuple[str, ...]] = {}
    attempts = 0
    limit = 10000 + 1000 * count
    while len(words) < count:
        attempts += 1
        if attempts > limit:
            raise ExhaustedNamespace(f"gave up after {limit} draws minting {count} words")
        seq = _draw_sequence(rng, inventory.symbols)
        if seq in taken_sequences:
            continue
        text = _draw_text(rng)
        if text in taken_texts:
            continue
        words[text] = seq
        taken_sequences.add(seq)
        taken_texts.add(text)
    return words


def gen_language(
    seed: int,
    vocab_size: int,
    inventory: PhoneInventory | None = None,
    language_tag: str = "synth",
) -> Lexicon:
    """Mint a language: distinct phone sequences, distinct written forms."""
    if vocab_size < 1:
        raise ValueError("vocab_size must be at least 1")
    inventory = inventory if inventory is not None else PhoneInventory.default()
    rng = np.random.default_rng(seed)
    words = _fill_words(rng, inventory, vocab_size, set(), set())
    return Lexicon(language_tag=language_tag, words=words, inventory=inventory)


def derive_related(
    parent: Lexicon,
    overlap: float,
    seed: int,
    language_tag: str | None = None,
) -> Lexicon:
    """Language of the same size sharing an exact fraction of the lexicon.

    Exactly round(overlap * |parent|) entries are copied verbatim (written
    form and phones); the rest are fresh words whose sequences and spellings
    collide with nothing in the parent.
    """
    if not (0.0 <= overlap <= 1.0):
        raise ValueError("overlap must be within [0, 1]")
    size = len(parent.words)
    n_shared = int(math.floor(overlap * size + 0.5))
    rng = np.random.default_rng(seed)
    parent_texts = sorted(parent.words)
    chosen = rng.choice(size, n_shared, replace=False) if n_shared else np.array([], dtype=int)
    words = {parent_texts[int(i)]: parent.words[parent_texts[int(i)]] for i in sorted(chosen)}
    fresh = _fill_words(
        rng,
        parent.inventory,
        size - n_shared,
        parent.phone_sequences() | set(words.values()),
        set(parent_texts),
    )
    words.update(fresh)
    return Lexicon(
        language_tag=language_tag or f"{parent.language_tag}-ov{overlap:g}",
        words=words,
        inventory=parent.inventory,
        parent_tag=parent.language_tag,
        overlap_fraction=overlap,
    )


@dataclass(frozen=True)
class SynthConfig:
    phone_duration: float = 0.1
    gap: float = 0.02
    utterance_words: tuple[int, int] = (3, 8)
    noise_snr_db: float = 30.0
    punctuation_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.phone_duration <= 0 or self.gap <= 0:
            raise ValueError("phone_duration and gap must be positive")
        lo, hi = self.utterance_words
        if not (1 <= lo <= hi):
            raise ValueError("utterance_words must satisfy 1 <= low <= high")
        if not (0.0 <= self.punctuation_rate <= 1.0):
            raise ValueError("punctuation_rate must be within [0, 1]")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


def _render_burst(frequency_hz: float, config: SynthConfig) -> np.ndarray:
    n = int(round(config.phone_duration * SAMPLE_RATE))
    t = np.arange(n, dtype=np.float64) / SAMPLE_RATE
    x = TONE_AMPLITUDE * np.sin(2.0 * math.pi * frequency_hz * t)
    n_fade = min(int(round(FADE_SECONDS * SAMPLE_RATE)), n // 2)
    if n_fade:
        ramp = 0.5 * (1.0 - np.cos(math.pi * np.arange(n_fade) / n_fade))
        x[:n_fade] *= ramp
        x[-n_fade:] *= ramp[::-1]
    return x


def render_words(words: list[str], lexicon: Lexicon, config: SynthConfig) -> np.ndarray:
    """Render clean audio: tone bursts, intra-word gaps, longer word gaps."""
    intra = np.zeros(int(round(config.gap * SAMPLE_RATE)))
    word_gap = np.zeros(int(round(WORD_GAP_FACTOR * config.gap * SAMPLE_RATE)))
    parts = [intra]
    for w_index, text in enumerate(words):
        if w_index:
            parts.append(word_gap)
        for p_index, symbol in enumerate(lexicon.words[text]):
            if p_index:
                parts.append(intra)
            parts.append(_render_burst(lexicon.inventory.frequency_of(symbol), config))
    parts.append(intra)
    return np.concatenate(parts)


def add_noise(samples: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    power = float(np.mean(samples**2))
    sigma = math.sqrt(power / (10.0 ** (snr_db / 10.0)))
    return samples + rng.normal(0.0, sigma, samples.shape)


def synth_corpus(
    lexicon: Lexicon,
    n_utterances: int,
    config: SynthConfig,
    out_dir: str | Path,
    jobs: int = 1,
) -> Manifest:
    """Generate WAV files plus a manifest for a corpus of random utterances.

    Every utterance derives from its own seed sequence (config seed, index),
    so regeneration is bit-identical file by file and independent of
    generation order, batching, or worker count.
    """
    if n_utterances < 1:
        raise ValueError("n_utterances must be at least 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    texts = sorted(lexicon.words)

    def make(index: int) -> UtteranceRecord:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(config.seed, index)))
        lo, hi = config.utterance_words
        n_words = int(rng.integers(lo, hi + 1))
        words = [texts[int(i)] for i in rng.integers(0, len(texts), n_words)]
        written = list(words)
        if config.punctuation_rate > 0:
            for w_index in range(len(written)):
                if rng.random() < config.punctuation_rate:
                    mark = PUNCTUATION_MARKS[int(rng.integers(0, len(PUNCTUATION_MARKS)))]
                    written[w_index] = written[w_index] + mark
        clean = render_words(words, lexicon, config)
        duration = len(clean) / SAMPLE_RATE
        if duration > 30.0:
            raise UtteranceTooLong(
                f"utterance {index} would last {duration:.2f} s; "
                f"shrink utterance_words or phone_duration"
            )
        noisy = (
            add_noise(clean, config.noise_snr_db, rng)
            if math.isfinite(config.noise_snr_db)
            else clean
        )
        utt_id = f"{lexicon.language_tag}-{index:05d}"
        filename = f"{utt_id}.wav"
        write_wav(out_dir / filename, noisy, SAMPLE_RATE)
        return UtteranceRecord(
            id=utt_id,
            audio=filename,
            text=" ".join(written),
            duration=duration,
            sample_rate=SAMPLE_RATE,
        )

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(make, range(n_utterances)))
    else:
        records = [make(index) for index in range(n_utterances)]
    header = ManifestHeader(language=lexicon.language_tag, script="Latn")
    return Manifest(header=header, records=records, base_dir=out_dir)


def _moving_average(x: np.ndarray, width: int) -> np.ndarray:
    kernel = np.ones(width) / width
    return np.convolve(x, kernel, mode="same")


def matched_filter_decode(samples: np.ndarray, lexicon: Lexicon, config: SynthConfig) -> str:
    """Recover the transcript with no learned parameters.

    Energy-envelope segmentation finds tone bursts; the dominant rFFT
    frequency of each burst snaps to the nearest carrier; gaps longer than
    twice the intra-word gap split words; each phone sequence resolves to the
    exact lexicon entry or, failing that, the nearest one by edit distance
    (ties to the lexicographically first written form).
    """
    x = np.asarray(samples, dtype=np.float64)
    envelope = _moving_average(np.abs(x), max(1, int(round(0.002 * SAMPLE_RATE))))
    threshold = 0.25 * float(envelope.max())
    active = np.concatenate([[False], envelope > threshold, [False]])
    change = np.diff(active.astype(np.int8))
    runs = list(zip(np.flatnonzero(change == 1), np.flatnonzero(change == -1)))
    min_burst = int(0.4 * config.phone_duration * SAMPLE_RATE)
    runs = [(a, b) for a, b in runs if b - a >= min_burst]
    if not runs:
        return ""

    nfft = 1 << int(math.ceil(math.log2(max(b - a for a, b in runs))))
    freqs = np.fft.rfftfreq(nfft, 1.0 / SAMPLE_RATE)
    symbols = []
    for a, b in runs:
        burst = x[a:b]
        window = np.hanning(len(burst))
        spectrum = np.abs(np.fft.rfft(burst * window, n=nfft))
        peak_hz = float(freqs[int(np.argmax(spectrum))])
        symbols.append(lexicon.inventory.nearest_symbol(peak_hz))

    word_break = 2.0 * config.gap * SAMPLE_RATE
    groups: list[list[str]] = [[symbols[0]]]
    for k in range(1, len(runs)):
        gap = runs[k][0] - runs[k - 1][1]
        if gap > word_break:
            groups.append([])
        groups[-1].append(symbols[k])

    by_sequence = {seq: text for text, seq in sorted(lexicon.words.items())}
    decoded = []
    for group in groups:
        seq = tuple(group)
        if seq in by_sequence:
            decoded.append(by_sequence[seq])
            continue
        best_text = min(
            sorted(lexicon.words),
            key=lambda t: (edit_distance(lexicon.words[t], seq).distance, t),
        )
        decoded.append(best_text)
    return " ".join(decoded)


def save_lexicon(lexicon: Lexicon, path: str | Path) -> None:
    payload = {
        "language_tag": lexicon.language_tag,
        "parent_tag": lexicon.parent_tag,
        "overlap_fraction": lexicon.overlap_fraction,
        "inventory": {
            "min_spacing_hz": lexicon.inventory.min_spacing_hz,
            "phones": [[p.symbol, p.frequency_hz] for p in lexicon.inventory.phones],
        },
        "words": {text: list(seq) for text, seq in sorted(lexicon.words.items())},
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_lexicon(path: str | Path) -> Lexicon:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    inventory = PhoneInventory(
        phones=tuple(Phone(sym, float(freq)) for sym, freq in payload["inventory"]["phones"]),
        min_spacing_hz=float(payload["inventory"]["min_spacing_hz"]),
    )
    return Lexicon(
        language_tag=payload["language_tag"],
        words={text: tuple(seq) for text, seq in payload["words"].items()},
        inventory=inventory,
        parent_tag=payload.get("parent_tag"),
        overlap_fraction=payload.get("overlap_fraction"),
    )
