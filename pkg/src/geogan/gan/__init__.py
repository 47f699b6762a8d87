"""Generator, discriminator, losses and the training estimator."""
from .data import load_split, stacks_to_arrays
from .estimator import CHECKPOINT_MAGIC, INPUT_MODES, ConstrainedPix2Pix, GanConfig
from .losses import (LossReport, composite_loss, constraint_penalty, discriminator_loss,
                     generator_loss, overlap_rate)
from .networks import PatchDiscriminator, UNetGenerator

__all__ = [
    "CHECKPOINT_MAGIC", "INPUT_MODES", "ConstrainedPix2Pix", "GanConfig", "LossReport",
    "PatchDiscriminator", "UNetGenerator", "composite_loss", "constraint_penalty",
    "discriminator_loss", "generator_loss", "load_split", "overlap_rate", "stacks_to_arrays",
]
