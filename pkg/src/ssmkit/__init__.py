"""ssmkit: data-driven reduced-order models on slow spectral submanifolds.

Learns oblique-projection reduced models from trajectory data and deploys
them in a receding-horizon tracking controller.  See README.md for the
pipeline and the shipped benchmark presets.
"""

__version__ = "0.1.0"
