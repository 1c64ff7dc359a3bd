"""posecast: skeletal motion forecasting with a parallel-decoding transformer.

The package is self-contained: a small reverse-mode autodiff core
(`posecast.autodiff`), neural building blocks (`posecast.layers`), the
encoder-decoder forecaster (`posecast.model`), training and evaluation
machinery (`posecast.training`, `posecast.metrics`), synthetic motion
data plus file formats (`posecast.data`), figure rendering
(`posecast.figures`) and a command line front end (`posecast.cli`).
"""

__version__ = "0.1.0"
