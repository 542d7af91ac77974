"""KAM reducibility for quasi-periodically forced anharmonic oscillators.

Numerical realizations, on finite truncations, of the full chain: confining
potentials, their Dirichlet spectra, turning-point eigenfunction asymptotics,
oscillatory matrix elements, the weighted matrix-class algebra, small-divisor
torus equations, the quadratic KAM iteration with its frequency-exclusion
measure estimates, and dynamical cross-validation of the resulting
reducibility.
"""

__version__ = "0.1.0"
