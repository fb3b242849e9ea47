"""Extreme token reduction for video token grids via adaptive vector quantization."""

from .baselines import ReducedSequence, ReducerSpec, interpolate_tokens, merge_tome, merge_vidtome, prune_tokens
from .metrics import ComplexityModel, MetricsReport, llm_flops, module_flops, tok_dense
from .quantizer import ClusterAssignment, QuantizerConfig, kmeans_adaptive, kmeans_fixed, quantize
from .token_grid import SynthConfig, TokenGrid, read_grid, synthesize_clip, write_grid
from .vq_core import Codebook, CompressedTokens, IndexMap, VQAttnParams, compress_clip

__version__ = "0.1.0"
