"""P1 finite elements for the integral fractional Laplacian on the interval and the disc."""

from .assembly import (AssemblyConfig, AssemblyError, StiffnessSystem, assemble_load,
                       assemble_mass, assemble_stiffness, assemble_system, exterior_weight,
                       normalization_constant, read_system_dump, write_system_dump)
from .experiments import (ConvergenceRecord, RunConfig, emit_csv, emit_plot, fit_rates,
                          read_csv, run_convergence)
from .mesh import (Mesh, SubdomainSpec, axis_square, build_disc_mesh, build_interval_mesh,
                   build_rectangle_mesh, mark_subdomain, read_mesh, refine_uniform,
                   shape_regularity, write_mesh)
from .norms import (ErrorReport, ExactSolution, disc_exact_solution, energy_error, eoc,
                    fractional_seminorm, h1_seminorm_error, l2_error, localized_energy_error)
from .projections import (CutoffFunction, build_cutoff, l2_locality_probe, l2_projection,
                          quasi_interpolant, superapprox_ratio)
from .solver import FemFunction, FractionalLaplaceSolver, SolverFailure, solve

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
