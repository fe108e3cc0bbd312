"""Seeded synthetic coupled datasets for the benchmark experiments"""
