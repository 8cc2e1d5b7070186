"""Essay argument-quality scoring: tokenization, encoder, training, ensembles."""

__version__ = "0.1.0"

from .errors import ArgscoreError

__all__ = ["ArgscoreError", "__version__"]
