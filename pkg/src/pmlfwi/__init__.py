"""Time-domain full-waveform inversion for Lamé parameters in PML-truncated 3D media.

Submodules
----------
specgrid
    Structured 27-node spectral-element mesh, LGL basis and DOF numbering.
pml_medium
    Stretch functions, PML coefficient products and material fields.
operators
    Diagonal mass and matrix-free C, K, G applicators (plus transposes), loads.
forward, adjoint
    Explicit RK-4 integration of the state and adjoint problems.
gradient
    Discrete reduced gradients, regularization and directional-derivative checks.
inversion
    Objective, L-BFGS, Armijo backtracking and the staged inversion driver.
harness
    Configuration, target models, synthetic data, noise, file I/O and the CLI.
"""

from pmlfwi._backend import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
