"""Dynamic mesh sequence compression, text-conditioned trajectory generation and curation."""

from .chunking import ChunkConfig, ChunkedTrajectory, split_chunks, tdgw_blend
from .mesh import DynamicMeshSequence, RelativeTrajectory, TriangleMesh
from .metrics import MetricReport, amd, ave, evaluate, rho_abn
from .sgtt import SGTT, SgttConfig, euler_sample, generate_animation, rf_loss
from .tensor import Rng, Tensor, grad_check
from .topology import bfs_band_oracle, hop_bands, one_hop, weighted_adjacency
from .vae import DyMeshVAE, VaeConfig, reconstruct

__version__ = "0.1.0"
