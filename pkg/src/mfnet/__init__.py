"""Weakly supervised salient object detection with multiple pseudo labels, at desk scale.

Modules: ``core`` (types, synthetic data, file formats), ``ndgrad`` (autodiff),
``nets``, ``cam``, ``refine``, ``labels``, ``losses``, ``trainer``, ``metrics``,
``gradcheck`` and ``cli``.
"""
__version__ = "0.1.0"
