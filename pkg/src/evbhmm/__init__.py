"""EV bHMM - bilinear hidden Markov identification and frequency regulation for EV fleets."""

__version__ = "0.1.0"
