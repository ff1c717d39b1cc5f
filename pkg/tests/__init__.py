"""
Test Suite - LAPRAN CS Toolkit
"""
