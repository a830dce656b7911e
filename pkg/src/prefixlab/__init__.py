"""Desk-scale prefix-tuned encoder-decoder transformer toolkit.

Subpackages cover: a float64 reverse-mode autodiff core, attention
blocking masks, truncated/Gumbel sparse attention, the prefix
transformer itself, SVD spectrum diagnostics, ROUGE scoring, synthetic
corpora, and a training/evaluation CLI.
"""

__version__ = "0.1.0"
