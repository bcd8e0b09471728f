"""Learned primal-dual CT reconstruction trained with an entropic Wasserstein loss."""

__version__ = "0.1.0"
