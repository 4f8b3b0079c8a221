"""Classical and semiclassical long-range scattering toolkit."""

__version__ = "0.1.0"
