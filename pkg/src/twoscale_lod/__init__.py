"""Two-scale localized orthogonal decomposition for Helmholtz-type scattering
by a locally periodic dielectric structure."""

__version__ = "0.1.0"
