"""Learning an unknown reaction rate inside bioreactor ODEs by unrolled Euler training."""

__version__ = "0.1.0"
