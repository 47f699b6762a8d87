"""Physics-constrained conditional GAN spatial regression for built-land maps."""
__version__ = "0.1.0"
