"""Bound-constrained sparse-representation reconstruction for EIT."""

from .basis import GraphBasis, build_adjacency, build_basis, default_truncation, mesh_basis
from .boundmap import BoundMap, calibrate_sigma0, global_scale, warm_start
from .forward import ForwardModel, ForwardSolution, jacobian, solve_forward, solve_forward_batch
from .mesh import ElectrodeLayout, Mesh, generate_cylinder_mesh, generate_disk_mesh
from .mesh_io import load_mesh, save_mesh, write_vtk
from .protocol import StimulationProtocol, adjacent_protocol, measurement_operator, tank_protocol
from .recon import LMFConfig, ReconResult, TVConfig, reconstruct

__version__ = "0.1.0"
