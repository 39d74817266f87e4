"""Float64 micro deep-learning framework with second-order response transform fusion."""

from sortnet.autodiff import Param, Tape, Tensor
from sortnet.fusion import BRANCH_SORT, LINEAR_SUM, FusionSpec, ResidualFuseParams, residual_sort_fuse, sort_fuse
from sortnet.model import Network
from sortnet.netbuild import NetworkSpec, build_lenet, build_mlp, build_resnet, build_vggish

__version__ = "0.1.0"

__all__ = [
    "BRANCH_SORT",
    "FusionSpec",
    "LINEAR_SUM",
    "Network",
    "NetworkSpec",
    "Param",
    "ResidualFuseParams",
    "Tape",
    "Tensor",
    "build_lenet",
    "build_mlp",
    "build_resnet",
    "build_vggish",
    "residual_sort_fuse",
    "sort_fuse",
]
