"""femloc: Monte Carlo localisation against feature-embedded voxel maps.

The package builds sparse voxel maps whose voxels carry averaged n-dimensional
feature descriptors, renders ("imagines") descriptor views from arbitrary
candidate poses, and runs a particle filter that weights pose hypotheses by
comparing imagined views with observed descriptor images. Frame-to-frame
motion comes from essential-matrix visual odometry.
"""

__version__ = "0.1.0"
