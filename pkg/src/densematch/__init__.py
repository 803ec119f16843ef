"""Dense correspondence with joint feature and cost-volume attention, on a small numpy autodiff core.

Importing the package does not import numpy, so entry points can pin
BLAS threading before any numerical library loads.
"""

__version__ = "0.1.0"
