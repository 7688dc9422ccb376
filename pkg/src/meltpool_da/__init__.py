"""Framework-free unsupervised domain adaptation for melt-pool anomaly
detection: data preparation, sensor-aware augmentation, adversarial domain
alignment, and classifier-discrepancy decision alignment."""

from .data import AugmentationConfig, DomainDataset
from .networks import ModelBundle
from .train import PhaseConfig

__version__ = "0.1.0"
__all__ = ["AugmentationConfig", "DomainDataset", "ModelBundle", "PhaseConfig",
           "__version__"]
