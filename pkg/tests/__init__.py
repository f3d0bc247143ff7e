"""
pomp-core - Test Suite
"""
