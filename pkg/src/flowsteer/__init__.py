"""flowsteer: context-steerable flow-matching action policies on a 2-D simulator."""

__version__ = "0.1.0"
