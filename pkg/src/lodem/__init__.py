"""Sliding-window lidar odometry with unsupervised EM learning of detector
scores and measurement covariances."""

__version__ = "0.1.0"
