"""
Data Layer - Datasets, Patch Pyramids and Measurement Files
"""
