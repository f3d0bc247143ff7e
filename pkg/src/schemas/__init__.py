"""
pomp-core - Config and report schemas
"""
