"""Visual-query video segmentation toolkit.

Library layout:
    masks      run-length mask codec and mask algebra
    metrics    per-video and dataset-level evaluation metrics
    synth      deterministic synthetic benchmark generator
    autodiff   float64 tensors with a replayable reverse-mode tape
    optim      parameter store, seeded init, AdamW, checkpoints
    pipeline   memory-evolution segmentation pipeline
    training   losses and the desk-scale overfit trainer
    cli        `vqs` command-line entry point
"""

__version__ = "0.1.0"
