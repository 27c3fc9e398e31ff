"""Mixed-view panorama synthesis with geospatial attention guided diffusion, at desk scale."""

__version__ = "0.1.0"
