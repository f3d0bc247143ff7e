"""
pomp-core - Monte-Carlo maximum principle toolkit for partially observed
forward-backward systems with jumps
"""

__version__ = "0.1.0"
__author__ = "Stewardship Solutions"
__email__ = "contact@stewardshipsolutions.com"
