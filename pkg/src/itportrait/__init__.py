"""Image-text coupled 3D portrait domain adaptation."""

__version__ = "0.1.0"
