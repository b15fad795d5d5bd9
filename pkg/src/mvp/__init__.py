"""Voice pathology detection from a sustained vowel and a read sentence.

Modules, bottom-up: ``ndcore`` (autodiff), ``nn`` (layers), ``audio`` (I/O,
DSP, augmentation), ``synthgen`` (synthetic corpus), ``backbone`` (frame
encoder), ``fusion`` (feature fusion), ``model`` (strategies), ``optim``
(AdamW, training loop), ``evalharness`` (cross-validation, metrics) and
``cli``.
"""

__version__ = "0.1.0"
