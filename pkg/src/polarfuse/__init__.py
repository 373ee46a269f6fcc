"""Polar-sampling point densification and feature-supervised LiDAR-camera fusion on synthetic scans.

Library layout:

* ``geometry``: boxes, scenes, direction/rotation angles and polar bins
* ``kitti``: velodyne/calib/label I/O, object cropping, PLY export
* ``sampling_db`` and ``pasting``: dense-object database build and pasting
* ``autograd``: numpy reverse-mode engine, SGD, gradient checking, tensor container
* ``bev``, ``fusion``, ``training``: toy BEV detector, fusion modules, both training phases
* ``simulator``: ray-cast synthetic LiDAR scenes and camera grids
* ``metrics``: rotated BEV IoU, NMS, AP over 40 recall points
* ``config``, ``pipeline``, ``plotting``, ``cli``: run configuration and operator surface
"""
from .config import TOOL_VERSION as __version__  # noqa: F401
