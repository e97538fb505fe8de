"""Vision-transformer ensemble for five-grade retinopathy classification."""

__version__ = "0.1.0"
