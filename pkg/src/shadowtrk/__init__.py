"""Minibatch edge classification on particle-hit graphs.

Sparse-matrix subgraph samplers, an Interaction GNN with a hand-written
reverse-mode tape, data-parallel training with a coalesced all-reduce, and
connected-components track building.
"""
__version__ = "0.1.0"
