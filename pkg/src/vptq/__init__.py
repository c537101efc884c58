"""Second-order vector post-training quantization of weight matrices."""

from vptq.codebook import Codebook, Role, TrainOptions, assign_nearest, train_codebook, train_residual_codebook
from vptq.hessian import HessianAccumulator, HessianData, accumulate, finalize, identity_hessian
from vptq.kernels import BACKEND
from vptq.packing import CompressionReport, compression_report, deserialize, pack, serialize, unpack
from vptq.quantizer import QuantConfig, QuantizedMatrix, dequantize, proxy_loss, quantize_matrix, quantize_model
from vptq.tensor_store import TensorF32, load_npy, save_npy

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "Codebook",
    "CompressionReport",
    "HessianAccumulator",
    "HessianData",
    "QuantConfig",
    "QuantizedMatrix",
    "Role",
    "TensorF32",
    "TrainOptions",
    "accumulate",
    "assign_nearest",
    "compression_report",
    "dequantize",
    "deserialize",
    "finalize",
    "identity_hessian",
    "load_npy",
    "pack",
    "proxy_loss",
    "quantize_matrix",
    "quantize_model",
    "save_npy",
    "serialize",
    "train_codebook",
    "train_residual_codebook",
    "unpack",
]
