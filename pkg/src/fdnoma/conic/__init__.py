"""Conic programs, the solver interface and the subproblem builders."""
from .builders import (
    BuildOptions,
    DegenerateReference,
    build_bfs_subproblem,
    build_cr_subproblem,
    build_crpf_subproblem,
    build_init_programs,
    iterate_from_solution,
)
from .program import Affine, ConicProgram, ConicSolution, ProgramBuilder, dump_program, solve

__all__ = [
    "Affine", "BuildOptions", "ConicProgram", "ConicSolution", "DegenerateReference", "ProgramBuilder",
    "build_bfs_subproblem", "build_cr_subproblem", "build_crpf_subproblem", "build_init_programs",
    "dump_program", "iterate_from_solution", "solve",
]
