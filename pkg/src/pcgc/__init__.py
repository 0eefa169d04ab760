"""Learned point cloud geometry codec built on sparse 3D convolutions.

Subpackages map onto the pipeline: :mod:`pcgc.tensor` (sparse tensors and
convolutions), :mod:`pcgc.octree` and :mod:`pcgc.rangecoder` (lossless
coordinates), :mod:`pcgc.entropy` (factorized prior and feature coding),
:mod:`pcgc.network` (encoder / hierarchical decoder), :mod:`pcgc.autodiff`
and :mod:`pcgc.training`, :mod:`pcgc.metrics`, :mod:`pcgc.io`,
:mod:`pcgc.codec` and :mod:`pcgc.cli`.
"""
from .network import CodecModel, NetConfig
from .tensor import ConvWeights, SparseTensor, make_sparse_tensor

__all__ = ["CodecModel", "NetConfig", "ConvWeights", "SparseTensor", "make_sparse_tensor"]
__version__ = "0.1.0"
