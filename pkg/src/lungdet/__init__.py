"""Desk-scale 2D lung-nodule detection: CT preprocessing, Swin-T + FPN + Faster R-CNN forward pass, COCO metrics."""

__version__ = "0.1.0"
