"""Computation-aware Transformer encodings of neural architecture cells.

Modules: ``space``/``darts`` (cells), ``masks`` and ``encoder`` (the
Transformer), ``pretrain`` (pairwise masked-operator training),
``encodings`` (baseline and learned encodings), ``benchmark`` (query
oracles), ``predictors`` and ``search`` (search algorithms), ``report`` and
``cli`` (experiment driver).
"""

__version__ = "0.1.0"
