"""Foreground-aware spectrum segmentation on synthetic low-contrast phantoms.

Three add-on modules around a small 3D U-Net: background/foreground feature
distribution separation (FA), wavelet-domain feature enhancement (FLFE), and
boundary keypoint constraints (EC), all running on a self-contained float32
autodiff engine.
"""

__version__ = "0.1.0"
