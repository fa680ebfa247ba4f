import pytest
import torch

from asrlab.corpus import Manifest
from asrlab.synthlang import SynthConfig, gen_language, synth_corpus

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_lexicon():
    return gen_language(seed=7, vocab_size=12, language_tag="tiny")


@pytest.fixture(scope="session")
def tiny_corpus(tiny_lexicon, tmp_path_factory):
    """16 short synthetic utterances shared by training-adjacent tests."""
    out = tmp_path_factory.mktemp("tiny_corpus")
    config = SynthConfig(utterance_words=(1, 2), seed=5)
    return synth_corpus(tiny_lexicon, 16, config, out)


def subset(manifest: Manifest, lo: int, hi: int) -> Manifest:
    return Manifest(manifest.header, manifest.records[lo:hi], manifest.base_dir)
