"""Pedestrian trajectory prediction: bounding-box and pose encoders, CVAE,
stepwise goal estimation, recurrent decoder, on a small numpy autodiff core."""

__version__ = "0.1.0"
