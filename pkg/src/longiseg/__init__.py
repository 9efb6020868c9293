"""Longitudinal MS lesion segmentation with 2.5D FC-DenseNets.

Static, early-fusion longitudinal, late-fusion siamese and multitask
(segmentation + self-supervised deformable registration) variants, the
MS-challenge metric suite, and a synthetic longitudinal phantom generator.
"""

__version__ = "0.1.0"
