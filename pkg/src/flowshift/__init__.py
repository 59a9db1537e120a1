"""Age translation in the latent space of a multi-scale flow, on a toy
shapes dataset whose labels can be read back by analytic oracles."""
from .checkpoint import ModelCheckpoint, load_checkpoint, save_checkpoint
from .glow import Glow, GlowConfig
from .ictm import ICTM, ICTMConfig, PriorGenerator
from .numerics import NumericsError, ShapeError, make_rng
from .pipeline import MODES, EvalReport, Translator, evaluate, translate_image
from .semantics import PrototypeTable, compute_prototypes, manipulate
from .training import TrainConfig, train_glow, train_ictm

__version__ = "0.1.0"

__all__ = [
    "EvalReport", "Glow", "GlowConfig", "ICTM", "ICTMConfig", "MODES", "ModelCheckpoint", "NumericsError",
    "PriorGenerator", "PrototypeTable", "ShapeError", "TrainConfig", "Translator", "compute_prototypes",
    "evaluate", "load_checkpoint", "make_rng", "manipulate", "save_checkpoint", "train_glow", "train_ictm",
    "translate_image",
]
