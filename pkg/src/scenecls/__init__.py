"""Acoustic scene classification toolkit.

Log-mel front end over two feature variants, small CNNs trained from scratch
with Adadelta, per-clip segment fusion and geometric-mean ensembling.
"""

__version__ = "0.1.0"
