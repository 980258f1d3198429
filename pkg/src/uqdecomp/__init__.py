"""Post-hoc aleatoric/epistemic uncertainty decomposition for closed-loop control.

Modules:
    mlp        dense networks, backpropagation and Adam
    env        planar lift plant and its two-stage sensor model
    aleatoric  Mahalanobis observation-density estimator
    epistemic  noise-robust forward-dynamics ensemble
    control    frozen policy and the five controller variants
    harness    seeded experiment grid, result tables and analyses
    capacity   uncertainty-guided detector capacity selection
"""

__version__ = "0.1.0"
