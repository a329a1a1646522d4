"""Policy blending over impairment-specific sub-policies with concurrent system identification."""

__version__ = "0.1.0"
