"""Multilingual joint CTC-attention speech recognition toolkit.

Self-contained numpy implementation: stacked bottleneck multilingual
features, a BLSTMP encoder with location-aware attention and a CTC
head, joint beam-search decoding, multilingual training regimes, and a
synthetic mini-language experiment harness.
"""

__version__ = "0.1.0"
