"""Schedule-language compiler: model definitions, schedule primitives, simulated parallel runtime."""

__version__ = "0.1.0"
