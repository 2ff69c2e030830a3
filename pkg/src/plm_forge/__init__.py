"""Toolkit for training, sampling from and evaluating small autoregressive protein language models."""

__version__ = "0.1.0"
