"""Class-incremental learning with generative replay and sleep-like weight downscaling.

Modules: ``autodiff`` (numpy reverse-mode engine), ``models`` (feature
extractor, VAE-classifier), ``trainer`` (replay, downscaling, training loop),
``data`` (dataset readers and task splits), ``metrics`` and ``sweep``
(evaluation and aggregation), ``cli`` (command-line entry point).
"""

__version__ = "0.1.0"
