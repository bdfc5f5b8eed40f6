"""Dirichlet eigenvalues of a planar domain with a thin attached tube.

Modules
-------
geometry
    Domain descriptions, graded triangular meshes and clipped quadrature.
fem
    P1/P2 assembly and sparse generalized eigensolvers.
spectral
    Half-disk Bessel oracle, eigenproblems and branch tracking.
almgren
    Frequency function, vanishing order, Steklov quotient and inequalities.
exterior
    Truncated exterior problems, ``m_k`` extrapolation and the profile ``Phi``.
asymptotics
    Eps-sweeps, rate and constant fits, blow-up comparison.
cli
    Command-line driver.
"""

__version__ = "0.1.0"
