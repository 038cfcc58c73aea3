"""Deep diffeomorphic normalizing flows built from Euler-integrated velocity fields."""

__version__ = "0.1.0"
