"""One-shot video object segmentation with a Siamese matching network."""

from .evaluation import contour_f, error_rate, evaluate_run, iou, transfer_error
from .network import DEFAULT, TINY, ArchitectureConfig, MatchingNetwork, init_network, load_checkpoint, profile, save_checkpoint
from .propagation import FinetuneConfig, PropagationConfig, propagate_sequence

__version__ = "0.1.0"
