"""Audio geolocation toolkit: geodesy, audio front end, heads, retrieval and
evaluation, plus a synthetic world to run them on."""

__version__ = "0.1.0"
