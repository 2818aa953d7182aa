"""
Diffusion-augmented invariant risk minimization for spatiotemporal graphs.
"""
__version__ = "0.1.0"
