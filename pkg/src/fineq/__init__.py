"""Low-bit fine-grained mixed-precision weight quantization and an accelerator model."""

__version__ = "0.1.0"

from .baselines import BaselineResult, rtn_quantize, uniform_quantize
from .codec import PackedBlock, pack_block, pack_tensor, unpack_block, unpack_tensor
from .errors import FineQError, FormatError, InvariantError, ValidationError
from .quant import (
    ChannelQuantParams,
    QuantConfig,
    QuantizedCluster,
    QuantizedTensor,
    SchemeCode,
    average_bits,
    channel_scale,
    dequantize_matrix,
    harmonize_pair,
    quantize_cluster,
    quantize_matrix,
    select_scheme,
)
from .sim import ActivityStats, SimConfig, estimate, hw_decode, run_matmul, temporal_encode
from .synth import GenSpec, gen
from .tensor_io import FloatTensor, PackedTensor, load_tensor, read_packed, save_tensor, write_packed
