"""Video food segmentation by transformer seeding and key-value memory propagation."""

__version__ = "0.1.0"
