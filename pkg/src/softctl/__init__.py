"""Hysteresis-aware whole-body modeling and PPO control of a three-chamber soft robot.

A synthetic plant (constant-curvature arc + per-chamber play operator) stands in
for the physical robot; everything downstream of data collection is the same
pipeline that would run on real motion-capture data.
"""

__version__ = "0.1.0"
