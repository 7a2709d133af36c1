"""First-order meta-learning (Reptile, FOMAML) and exact MAML on small numpy models."""

__version__ = "0.1.0"
