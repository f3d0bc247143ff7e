"""
pomp-core - Numerical engines
"""
