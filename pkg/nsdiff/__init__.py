"""
NsDiff.

Non-stationary diffusion toolkit for probabilistic time-series forecasting.

Author: Kirill Kondrashov <kirpall@ya.ru>
Version: 0.1.0
"""

__version__ = "0.1.0"
__author__ = "Kirill Kondrashov"
__email__ = "kirpall@ya.ru"
__description__ = (
    "Denoising diffusion forecaster with a location-scale endpoint "
    "and an uncertainty-aware noise schedule."
)

__all__ = [
    "__version__",
    "__author__",
    "__email__",
    "__description__",
]
