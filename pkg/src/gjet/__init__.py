"""gjet: numerical toolkit for generating-function Jacobian equations.

Evaluate the maps and matrices induced by a scalar generating function
G(x, y, z), certify its structural conditions by sampling, build and
solve semi-discrete second boundary value problems with piecewise
G-affine functions, and diagnose Monge-Ampere residuals on grids.
"""

from .errors import (
    AnchorInadmissible,
    ConfigError,
    DomainViolation,
    GjetError,
    InfeasibleBracket,
    MassImbalance,
    NoConvergence,
    NoRoot,
    OutOfImage,
    RangeViolation,
    SingularE,
    UnsupportedGeometry,
)
from .genfun import (
    GeneratingFunction,
    ParallelBeam,
    PointSourcePlane,
    QuadraticOT,
    dual_Astar_Bstar,
    dual_H,
    eval_bundle,
    forward_YZ,
    map_Q,
    map_X,
    matrix_A,
    matrix_A_B,
    matrix_E,
)

__version__ = "0.1.0"
