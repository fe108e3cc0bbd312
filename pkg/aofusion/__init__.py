"""AO-ADMM for constrained, linearly coupled matrix, CP and PARAFAC2 factorizations"""

__version__ = "0.1.0"
