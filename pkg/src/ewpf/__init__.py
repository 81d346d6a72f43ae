"""Transformer, LSTM and GRU wind-power forecasters on a small numpy autodiff core."""

__version__ = "0.1.0"
