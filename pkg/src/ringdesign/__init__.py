"""Ring microresonator dispersion simulation and tree-ensemble inverse design."""

__version__ = "0.1.0"
