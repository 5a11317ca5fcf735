"""Exposure-bias experiments for small sequence-to-sequence dialogue models.

A numpy autodiff engine, a tied-embedding transformer, teacher forcing,
scheduled sampling and the adaptive bridge sampler, plus the metrics used to
compare them.
"""

__version__ = "0.1.0"
