"""GPS-aided LiDAR-inertial odometry and mapping toolkit.

Modules: :mod:`geom` (rotations and rigid poses), :mod:`imu`
(preintegration), :mod:`features` (edge, surface and ground points),
:mod:`registration` (scan-to-map matching), :mod:`geo` (WGS84 and ENU),
:mod:`posegraph` (sliding-window fusion), :mod:`spline` (continuous-time
trajectories and deskew), :mod:`mapping` (voxel map and sessions),
:mod:`simulator` (synthetic worlds and datasets) and :mod:`pipeline`.
"""

__version__ = "0.1.0"
