"""
pomp-core - Observability (logging, metrics, tracing)
"""
