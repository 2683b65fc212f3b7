"""Constraint energy minimizing generalized multiscale DG for the 2D wave equation."""
from .assembly import FineOperators, MassSolver, assemble_anorm, assemble_ipdg, assemble_mass
from .cem import (MultiscaleBasis, SingularKKTError, build_multiscale_basis, load_basis,
                  localization_error, m_schedule, save_basis, solve_global_basis)
from .diagnostics import (ErrorReport, StudyConfig, energy_error, l2_error, run_convergence_study,
                          run_decay_study)
from .grid import MeshHierarchy, build_hierarchy, oversample_region
from .medium import CoefficientField, constant_field, load_raster, synthetic_field
from .spectral import TestSpace, build_spectral_basis, solve_block_eigen
from .wavesim import (SourceLoad, SourceSpec, StabilityWarning, downscale, estimate_cfl,
                      init_coarse, init_fine, run_coarse, run_fine)

__version__ = "0.1.0"
