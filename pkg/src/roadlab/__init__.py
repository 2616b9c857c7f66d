"""Road-following lab: LiDAR-image behavioral cloning, driving metrics and a closed-loop simulator."""

__version__ = "0.1.0"
