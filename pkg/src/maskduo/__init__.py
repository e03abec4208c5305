"""Masked spectrogram/image modeling with a momentum target encoder.

The online network sees only visible patches and predicts, slot by
slot, the standardized representations a slowly-moving copy of itself
computes from the patches it never saw.  Submodules:

- ``patches``: grids, tokenization, mask plans, positional encoding
- ``backbone``: transformer encoder and narrow predictor
- ``training``: the duo trainer, EMA schedule, loss, checkpoints
- ``audio``: log-mel front end, WAV I/O, manifests, stats
- ``features``: clip-level feature summaries
- ``evaluation``: linear probe, fine-tuning, metrics, augmentations
- ``synthetic``: seeded test corpora
- ``experiments``: end-to-end runs, sweeps, reports
- ``cli``: the ``maskduo`` command
"""

from .patches import InputGrid, MaskPlan, PatchSequence, ShapeSpec
from .training import DuoTrainer, TrainConfig

__version__ = "0.1.0"

__all__ = [
    "InputGrid",
    "MaskPlan",
    "PatchSequence",
    "ShapeSpec",
    "DuoTrainer",
    "TrainConfig",
    "__version__",
]
