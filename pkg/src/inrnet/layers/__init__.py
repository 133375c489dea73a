"""Continuous layers estimated on point sets, and the graphs composing them."""

from .basis import (
    LegendreBasis,
    assign_regions,
    embed,
    grid_regions,
    inner_product,
    legendre_basis,
    legendre_expand,
    legendre_project,
    tokenize,
)
from .conv import ConstantKernel, avg_pool, conv_binned, conv_forward, max_pool, window_support
from .geometry import STATS, neighborhood, output_points, stride_points, upsample_points
from .graph import (
    GraphBuilder,
    NetworkGraph,
    Node,
    OutputInr,
    deserialize_graph,
    forward,
    load_graph,
    save_graph,
    serialize_graph,
)
from .kernels import GaussianKernel, KernelSpline, MlpKernel, Support, VoronoiBins
from .pointwise import (
    NormState,
    activation,
    downsample,
    global_pool,
    linear_combination,
    normalize,
    positional_encoding,
    upsample,
)

__all__ = [
    "ConstantKernel", "GaussianKernel", "GraphBuilder", "KernelSpline", "LegendreBasis", "MlpKernel",
    "NetworkGraph", "Node", "NormState", "OutputInr", "STATS", "Support", "VoronoiBins", "activation",
    "assign_regions", "avg_pool", "conv_binned", "conv_forward", "deserialize_graph", "downsample",
    "embed", "forward", "global_pool", "grid_regions", "inner_product", "legendre_basis",
    "legendre_expand", "legendre_project", "linear_combination", "load_graph", "max_pool",
    "neighborhood", "normalize", "output_points", "positional_encoding", "save_graph",
    "serialize_graph", "stride_points", "tokenize", "upsample", "upsample_points", "window_support",
]
