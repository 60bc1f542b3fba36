"""kleinlab: numerical experiments on Schottky groups, conformal densities
and unipotent flows over convex cocompact hyperbolic 3-manifolds."""

__version__ = "0.1.0"
