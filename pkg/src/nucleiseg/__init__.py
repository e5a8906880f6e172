"""Detection losses, mask geometry and panoptic-quality evaluation for nuclei instance segmentation."""

__version__ = "0.1.0"
