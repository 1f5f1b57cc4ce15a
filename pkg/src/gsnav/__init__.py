"""Differentiable Gaussian-splat rendering fused with GNSS/INS navigation.

Subpackages:

* geometry      SE(3)/SO(3) algebra and tangent-space derivative blocks
* gaussian_map  the splat map, its maintenance ops, and serialization
* rasterizer    CPU tile renderer, analytical gradients, naive oracle
* mapping / tracking   keyframed map optimization and photometric tracking
* fusion        sliding-window factor graph (IMU, GNSS, visual, splat factors)
* sim           multi-sensor simulator and trajectory evaluation
* cli           the gsnav command-line interface
"""

__version__ = "0.1.0"
