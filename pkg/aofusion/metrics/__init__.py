"""Fit, PARAFAC2 residual, factor match score and clustering accuracy"""
