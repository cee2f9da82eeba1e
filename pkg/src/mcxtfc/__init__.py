"""Monte-Carlo X-TFC: ensembles of randomized physics-informed least-squares fits."""

__version__ = "0.1.0"
