"""Two-phase reservoir flow, projection-based model reduction, and a
residual recurrent-network surrogate, with a Monte-Carlo UQ harness on top.

Layout:

``geo``    structured grid, log-normal permeability sampling, clustering
``fom``    full-order pressure/saturation solver
``basis``  POD bases and DEIM interpolation
``rom``    reduced-order time stepping (Galerkin and DEIM variants)
``drrnn``  residual recurrent network, hand-rolled BPTT and rmsprop
``uq``     ensembles, error metrics, kernel density estimates
``matio``  binary matrix files and plain-text metadata sidecars
"""

__version__ = "0.1.0"
