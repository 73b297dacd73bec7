"""Heterogeneous SparseLoCo: communication-efficient training across mixed-bandwidth replicas."""

__version__ = "0.1.0"
