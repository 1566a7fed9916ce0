"""Multi-grained contrastive pretraining for vision transformers.

Submodules: ``geometry`` (crop correspondences), ``augment`` (view pairs),
``model`` (ViT and heads), ``contrast`` (multi-granularity loss), ``trainer``,
``oracle`` (independent references for tests), ``data`` and ``cli``.
"""

__version__ = "0.1.0"
