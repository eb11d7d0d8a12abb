"""Model-free quantum gate design with policy-gradient learning and annealing."""
__version__ = "0.1.0"
