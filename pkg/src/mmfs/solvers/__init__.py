from .dcd import (DualSolution, SolverConfig, dual_objective, excluded_mask, mmfs_dcd,
                  primal_objective, projected_gradient)
from .qp import (box_qp_solve, constrained_qp_solve, hard_margin_dual, lambda_max,
                 project_box_simplex)

__all__ = [
    "DualSolution", "SolverConfig", "box_qp_solve", "constrained_qp_solve", "dual_objective",
    "excluded_mask", "hard_margin_dual", "lambda_max", "mmfs_dcd", "primal_objective",
    "project_box_simplex", "projected_gradient",
]
