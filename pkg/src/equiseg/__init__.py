"""equiseg: rotation- and scale-equivariant convolutions for curvilinear
structure segmentation, built on a Fourier filter parameterization."""

__version__ = "0.1.0"
