"""qude: data-driven characterization of superconducting qubit dynamics.

Augments a Liouville-von Neumann or Lindblad baseline model with trainable
source terms (structure-preserving, affine, nonlinear), trains them against
tomography data, and evaluates/interprets the fitted models.
"""

__version__ = "0.1.0"

from . import cli, dynamics, metrics, models, qcore, tomography, train

__all__ = [
    "__version__",
    "cli",
    "dynamics",
    "metrics",
    "models",
    "qcore",
    "tomography",
    "train",
]
