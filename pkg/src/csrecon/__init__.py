"""Compressive-sensing reconstruction of images from a subset of pixels or transform samples."""
from .bp import BpSettings, BpSolution, basis_pursuit, bpdn
from .errors import DegenerateInputError, DimensionError, InfeasibleError, InvalidSizeError, TooLargeError
from .gradient import GradientSettings, reconstruct_gradient
from .omp import SparseSolution, matching_pursuit, omp
from .pipeline import Algorithm, Image, ReconConfig, load_grayscale, make_mask, psnr, reconstruct_image
from .transforms import BasisKind, SensingOperator, build_basis, draw_selector
from .tv import TvSettings, tv_denoise, tv_norm, tv_reconstruct

__version__ = "0.1.0"
