"""Latent dynamics surrogates for parameterized time-dependent PDEs.

End-to-end pipeline: full-order snapshot generation (1D Burgers, 2D
advection-diffusion-reaction), snapshot datasets with time/parameter splits,
a convolutional autoencoder coupled to an affinely-modulated latent ODE
integrated by explicit Runge-Kutta schemes, discretize-then-optimize
training, and the evaluation/verification sweeps (error indicators,
time-resolution refinement, perturbation stability, convergence order).
"""

__version__ = "0.1.0"
