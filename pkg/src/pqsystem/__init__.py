"""Critical parameter curves and nonnegative solutions for coupled p/q-Laplacian systems.

The package discretizes

    -Delta_p u = lam |u|^(p-2) u + c1 f |u|^(alpha-2) |v|^beta u
    -Delta_q v = mu  |v|^(q-2) v + c2 f |u|^alpha |v|^(beta-2) v

with P1 elements and zero Dirichlet data on intervals and rectangles, and
computes the first eigenpairs, a constrained-minimization threshold curve
(an upper bound on an infimum), a sup-inf curve (certified lower bounds plus
Picone upper bounds), and Nehari-set solutions with nonexistence probes.
"""

from .coupling import DiscreteProblem
from .problem import Domain, ProblemSpec, SpecError, Weight, WeightPiece, validate_spec

__version__ = "0.1.0"

__all__ = [
    "DiscreteProblem",
    "Domain",
    "ProblemSpec",
    "SpecError",
    "Weight",
    "WeightPiece",
    "validate_spec",
    "__version__",
]
