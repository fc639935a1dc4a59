"""Finite-dimensional higher torsion forms of flat superconnections."""

__version__ = "0.1.0"

from .graded import (
    GradedSpace,
    GradedComplex,
    HarmonicData,
    SchemaError,
    ContractError,
    check_complex,
    adjoint,
    laplacian_and_harmonics,
    euler_chars,
)
from .exterior import (
    TorusGrid,
    GeneratorSet,
    SuperForm,
    ScalarForm,
    make_generators,
    mul,
    supertrace,
    exp_neg,
    analytic_function,
    d_base,
    integrate_base,
    f_torsion,
    f_torsion_prime,
    POINT,
)

__all__ = [
    "GradedSpace",
    "GradedComplex",
    "HarmonicData",
    "SchemaError",
    "ContractError",
    "check_complex",
    "adjoint",
    "laplacian_and_harmonics",
    "euler_chars",
    "TorusGrid",
    "GeneratorSet",
    "SuperForm",
    "ScalarForm",
    "make_generators",
    "mul",
    "supertrace",
    "exp_neg",
    "analytic_function",
    "d_base",
    "integrate_base",
    "f_torsion",
    "f_torsion_prime",
    "POINT",
]
