"""Direct association analysis for case/control microbiome studies."""

__version__ = "0.1.0"
