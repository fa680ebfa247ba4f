"""Desk-scale lab for low-resource speech recognition transfer experiments.

Submodules:
    textnorm      Unicode cleanup applied before scoring
    metrics       edit-distance alignment, WER/CER, pooled corpus reports
    audio         PCM16 mono WAV IO
    corpus        manifests: validation, duration-balanced splits, stats
    features      log-mel spectrogram frontend
    model         miniature encoder-decoder speech transformer
    training      deterministic training loop, checkpoints, evaluation
    synthlang     synthetic tone languages with controllable lexical overlap
    orchestrator  zeroshot/intermediate/dtf/mtf comparison matrix
    cli           command-line interface
"""

__version__ = "0.1.0"
