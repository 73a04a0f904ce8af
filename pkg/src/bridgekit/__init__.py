"""bridgekit: a desk-scale numerical toolkit for Schrodinger bridges.

Submodules
----------
entropic_ot
    Log-domain Sinkhorn for discrete entropic optimal transport, plus the
    Gaussian closed form.
gaussian_bridge
    Closed-form Gaussian Schrodinger bridges for linear reference SDEs.
path_sim
    Euler SDE simulation, bridge-mixture sampling, Girsanov functionals.
soc
    Grid-based HJB / Feynman-Kac solvers and stochastic-control losses.
imf
    Iterative Markovian fitting with per-time-bin ridge drift models.
discrete_sb
    Finite-state CTMC bridges: Doob tilts, exact SB couplings, DDSBM.
cli
    Command-line entry point (``bridgekit run / verify / list``).
"""

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "entropic_ot",
    "gaussian_bridge",
    "path_sim",
    "soc",
    "imf",
    "discrete_sb",
]
