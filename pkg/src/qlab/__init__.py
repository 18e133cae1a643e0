"""qlab: conformal metrics from Q-curvature data and their Poincaré-type inequalities."""

__version__ = "0.1.0"
