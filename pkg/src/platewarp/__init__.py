"""platewarp: desk-scale warped planar license plate detection.

A small convolutional network with a fixed Sobel edge branch predicts, per
output cell, an object probability and a local affine map that localizes
and rectifies a planar plate.  Training, qIoU evaluation and detection run
end-to-end on synthetic or user-supplied data.

Submodules are imported lazily by callers (the CLI pins BLAS threads before
numpy loads, so this package root must stay import-light).
"""

__version__ = "0.1.0"
