"""1-Lipschitz convolutional networks from skew orthogonal convolutions,
projection pooling and curvature-based robustness certificates."""

__version__ = "0.1.0"
