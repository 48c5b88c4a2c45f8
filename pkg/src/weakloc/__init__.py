"""Weakly supervised anomaly localization with a branched image-translation GAN.

Modules: ``synthetic`` (benchmark generator), ``data`` (loading and batching),
``networks``, ``losses``, ``training``, ``evaluation`` and ``cli``.
"""

__version__ = "0.1.0"
