"""Proximal operators for the per-mode regularizers"""
