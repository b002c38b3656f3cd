"""Unpaired image translation with a self-regularized generator and an attention mask."""

__version__ = "0.1.0"
