"""Thompson sampling step-count simulator with a language-model action filter."""

__version__ = "0.1.0"
