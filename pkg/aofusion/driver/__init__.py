"""Outer alternating-optimization loop, multi-start and the PARAFAC2-ALS baseline"""
