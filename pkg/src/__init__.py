"""
LAPRAN CS Toolkit - Core Package
Multi-rate compressive sensing with a Laplacian pyramid of reconstructive adversarial networks
"""

__version__ = "1.0.0"
