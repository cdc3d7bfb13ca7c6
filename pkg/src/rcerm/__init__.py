"""Desk-scale domain-generalization lab.

ERM baseline plus queue-based contrastive training whose positives are
generated by gated fusion and attention over per-(class, domain) queues
of EMA-teacher embeddings, with a sweep/selection harness on a synthetic
multi-domain shape dataset.
"""

from .tensor import Tensor, backward, constant
from .trainer import TrainConfig, train_run

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "constant", "TrainConfig", "train_run", "__version__"]
