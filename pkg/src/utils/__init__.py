"""
Utilities Layer - Configuration, Environment, Run Directories and Errors
"""
