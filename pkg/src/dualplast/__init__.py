"""Small-strain elastoplastic state update by Newton minimization of the reduced dual."""
from .material import (DimMode, IsotropicHardening, MaterialState, ReturnMapError, ReturnMapResult,
                       VonMisesModel, complementary_energy, consistent_tangent, elastic_moduli,
                       pq_matrices, return_map, trial_state, yield_value)
from .oracle import (ConvexityError, IpProblem, OracleStall, kkt_residual, lagrangian_min,
                     solve_ip_oracle, von_mises_problem)
from .fem import (DofMap, Discretization, Mesh, MeshError, PlateGeometry,
                  build_quarter_plate_mesh, read_mesh, shape_B, write_mesh)
from .solver import ConvergenceError, IterationRecord, NewtonConfig, ReducedDual, SolveReport

__version__ = "0.1.0"
