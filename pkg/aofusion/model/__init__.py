"""Declarative coupled-model description, validation and initialization"""
