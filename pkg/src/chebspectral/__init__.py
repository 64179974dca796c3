"""Sparse symmetric eigensolver and spectral clustering toolkit.

Sequential and (simulated-)distributed block Chebyshev-Davidson solvers,
a 2D process-grid with cost-counted collectives, 1.5D sparse-times-dense
multiplication, tree-based tall-skinny QR, and the clustering pipeline.
"""

from chebspectral.chebdav import (EigResult, FilterBounds, SolverConfig,
                                  bchdav_solve, cheb_scalar, chebyshev_filter,
                                  dgks_orthonormalize)
from chebspectral.clustering import Partition, ari, kmeans, nmi, row_normalize
from chebspectral.graph import (CsrMatrix, EdgeList, gen_sbm, load_edge_list,
                                load_imbalance, normalized_laplacian,
                                spmm_serial)

__version__ = "0.1.0"

__all__ = [
    "CsrMatrix", "EdgeList", "EigResult", "FilterBounds", "Partition",
    "SolverConfig", "ari", "bchdav_solve", "cheb_scalar", "chebyshev_filter",
    "dgks_orthonormalize", "gen_sbm", "kmeans", "load_edge_list",
    "load_imbalance", "nmi", "normalized_laplacian", "row_normalize",
    "spmm_serial",
]
