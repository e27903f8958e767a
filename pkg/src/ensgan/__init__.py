"""Adversarial training of a retrieval-generation dialogue ensemble at desk scale.

Modules: ``ndtensor`` (tape autodiff), ``corpus``, ``retrieval`` (TF-IDF),
``seq2seq`` (G1), ``ranker`` (G2 and D), ``adversarial`` (the minimax loop),
``metrics``, ``config``, ``checkpoint`` and ``cli``.
"""

__version__ = "0.1.0"
