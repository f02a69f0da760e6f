"""quantnoise: quantization-aware / noisy training of small CNNs and
measurement of their robustness against Gaussian activation noise.

The library trains small convolutional networks (optionally with uniform
fake quantization and/or forward-only Gaussian noise injection), sweeps
test accuracy over a grid of noise intensities, and summarises robustness
as the midpoint noise level: the sigma at which accuracy falls to half of
its maximum, obtained from a weighted logistic fit.
"""

from quantnoise.errors import (
    ConfigError,
    DataError,
    FitConvergenceError,
    NumericError,
    ShapeError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "FitConvergenceError",
    "NumericError",
    "ShapeError",
    "__version__",
]
