"""In-context classification with single-layer self-attention and its
closed-form gradient-descent counterparts."""

__version__ = "0.1.0"
