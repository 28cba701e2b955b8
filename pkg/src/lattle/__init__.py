"""Cross-domain tabular transfer by transplanting language-model attention weights."""

__version__ = "0.1.0"
