"""Respiratory-motion-resolved 4D reconstruction of sequential 2D slice stacks.

Pipeline: self-supervised respiratory-state classification (NCC peak
pseudo-labels training a bidirectional LSTM) followed by per-state
super-resolution reconstruction with a Gaussian PSF forward model and
directional total-variation regularization.  A breathing phantom makes
every stage verifiable without clinical data.
"""

__version__ = "0.1.0"
