"""Tree-of-Attribute prompt learning toolkit."""

__version__ = "0.1.0"
