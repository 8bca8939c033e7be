"""Physics-based facial animation with learned actuation."""
__version__ = "0.1.0"
