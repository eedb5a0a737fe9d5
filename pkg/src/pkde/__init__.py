"""Pore-probability estimation from layer-wise monitoring images.

Subpackages: ``core`` (data model, energy density, splits, manifests),
``labeler`` (KDE pore-probability labels), ``xct`` (CT volume handling and
pore detection), ``synth`` (synthetic builds), ``nn`` (encoder-decoder
network), ``tuner`` (hyperparameter search), ``evalreport`` (scores and
box-plot statistics) and ``cli``.
"""

__version__ = "0.1.0"
