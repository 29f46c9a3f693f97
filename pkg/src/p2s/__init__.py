"""Self-supervised single-image denoising for event-count (shot) noise.

The pipeline: synthesize or load a noisy image, train an unrolled
sparse-coding network on that image alone with a count-likelihood loss
plus neighbor-subsampling losses, and evaluate with PSNR/SSIM against the
clean reference when one exists.  A classical fixed-dictionary ISTA solver
doubles as baseline and as an exactness oracle for the network.
"""

__version__ = "0.1.0"

from .imagecore import ImageGrid, concentric_phantom, load_image, normalize, save_image
from .ista import IstaProblem, make_problem, run_ista
from .network import NetConfig, P2SNetwork, init_network, tied_network
from .noise_metrics import MetricReport, NoiseSpec, evaluate, make_noisy, psnr, ssim
from .trainer import DenoiseReport, TrainConfig, neighbor_downsample, train

__all__ = [
    "__version__",
    "ImageGrid",
    "concentric_phantom",
    "load_image",
    "normalize",
    "save_image",
    "IstaProblem",
    "make_problem",
    "run_ista",
    "NetConfig",
    "P2SNetwork",
    "init_network",
    "tied_network",
    "MetricReport",
    "NoiseSpec",
    "evaluate",
    "make_noisy",
    "psnr",
    "ssim",
    "DenoiseReport",
    "TrainConfig",
    "neighbor_downsample",
    "train",
]
