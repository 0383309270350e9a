"""Ring-type pairwise belief propagation for MIMO detection, with convergence
oracles and density evolution for binary input."""

__version__ = "0.1.0"
