"""
Models Layer - Stage Networks, Weights and Losses
"""
