"""Hardware-free laboratory for floating-point non-associativity robustness studies."""

__version__ = "0.1.0"
