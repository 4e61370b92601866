"""volformer: slice-wise CNN + transformer toolkit for predicting 3-class
radiographic knee-osteoarthritis progression from volumetric scans."""

__version__ = "0.1.0"
