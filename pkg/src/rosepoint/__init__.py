"""Plant-part segmentation of rosebush point clouds with point-set networks."""

__version__ = "0.1.0"
