"""
duohand - single-to-dual-view adaptation for 3D hand pose estimation.
"""

__version__ = "0.1.0"
