"""Follow-the-leader traffic on a 1-to-K junction: simulation, homogenization,
flux-limiter estimation and the limiting Hamilton-Jacobi junction problem."""

__version__ = "0.1.0"
