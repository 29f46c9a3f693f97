"""The unrolled denoising network: T shrinkage-refinement steps over a sparse code.

Forward pass (code starts at zero, runs a fixed number of steps):

    A_i = shrink(A_{i-1} + Encoder(Y - Decoder(A_{i-1})), eps)
    raw = Decoder(A_T)

Encoder and decoder are free single convolutions (the step size of the
classical iteration is absorbed into the encoder weights), and the
per-filter shrinkage thresholds are learned.  The image estimate is either
``raw`` or ``exp(raw)`` depending on ``exp_output``; the exponential map
keeps the estimate positive and makes the event-count likelihood term and
the L1 term agree on the same optimum, which is what lets self-supervised
training actually converge to the clean signal (see trainer).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import autodiff as ad
from .autodiff import KernelBank, ValueNode, correlate2d, correlate2d_adjoint
from .imagecore import ImageGrid
from .rng import stream


class NonFiniteActivation(RuntimeError):
    """A refinement step produced NaN/Inf; message names the step index."""


@dataclass(frozen=True)
class NetConfig:
    """Architecture and initialization knobs.

    ``num_filters`` defaults to the desk-scale 64; production-scale 512 is a
    config change away.  ``spectral_target`` rescales the freshly drawn
    encoder so the composed encode/decode map has operator norm below one,
    which keeps all unroll steps finite for any seed.
    """

    num_filters: int = 64
    kernel_size: int = 3
    unroll_steps: int = 10
    threshold_init: float = 1e-2
    weight_init: str = "scaled_uniform"
    weight_seed: int = 0
    exp_output: bool = True
    spectral_target: float = 0.5

    def __post_init__(self):
        if self.num_filters < 1:
            raise ValueError("num_filters must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd and positive")
        if self.unroll_steps < 1:
            raise ValueError("unroll_steps must be >= 1")
        if self.threshold_init < 0:
            raise ValueError("threshold_init must be nonnegative")
        if self.weight_init != "scaled_uniform":
            raise ValueError(f"unknown weight_init scheme {self.weight_init!r}")
        if not 0 < self.spectral_target:
            raise ValueError("spectral_target must be positive")


class P2SNetwork:
    """Encoder/decoder banks plus learned thresholds; owned by one trainer."""

    def __init__(self, encoder: KernelBank, decoder: KernelBank,
                 unroll_steps: int, exp_output: bool = True):
        if encoder.kernel_size != decoder.kernel_size:
            raise ValueError("encoder and decoder kernel sizes must match")
        if encoder.in_channels != 1 or decoder.out_channels != 1:
            raise ValueError("network maps a single-channel image through M code channels")
        if encoder.out_channels != decoder.in_channels:
            raise ValueError(
                f"encoder emits {encoder.out_channels} channels but decoder "
                f"consumes {decoder.in_channels}"
            )
        if encoder.thresholds is None:
            raise ValueError("encoder bank must carry the per-filter thresholds")
        if unroll_steps < 1:
            raise ValueError("unroll_steps must be >= 1")
        self.encoder = encoder
        self.decoder = decoder
        self.unroll_steps = int(unroll_steps)
        self.exp_output = bool(exp_output)

    @property
    def num_filters(self) -> int:
        return self.encoder.out_channels

    @property
    def kernel_size(self) -> int:
        return self.encoder.kernel_size

    def banks(self) -> list[KernelBank]:
        return [self.encoder, self.decoder]

    def _check_input(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if y.ndim != 2:
            raise ValueError(f"expected a 2-D image, got shape {y.shape}")
        if min(y.shape) < self.kernel_size:
            raise ValueError(f"image {y.shape} smaller than kernel {self.kernel_size}")
        return y

    def forward(self, noisy) -> tuple[ValueNode, ValueNode]:
        """Graph-recording pass: returns (raw output (1,H,W), final code (M,H,W))."""
        y = self._check_input(noisy.data if isinstance(noisy, ImageGrid) else noisy)
        ynode = ad.constant(y[None], name="noisy")
        code = ad.constant(np.zeros((self.num_filters, *y.shape)), name="code0")
        for step in range(1, self.unroll_steps + 1):
            recon = ad.conv2d(code, self.decoder)
            resid = ad.sub(ynode, recon)
            lifted = ad.conv2d(resid, self.encoder)
            code, finite = ad.add_soft_threshold(code, lifted, self.encoder.thresholds)
            if not finite:
                raise NonFiniteActivation(f"non-finite code after refinement step {step}")
        raw = ad.conv2d(code, self.decoder)
        return raw, code

    def forward_arrays(self, noisy) -> tuple[np.ndarray, np.ndarray]:
        """Inference pass without graph recording; identical arithmetic."""
        y = self._check_input(noisy.data if isinstance(noisy, ImageGrid) else noisy)
        wd = self.decoder.weights.values
        we = self.encoder.weights.values
        eps = self.encoder.thresholds.values
        y3 = y[None]
        code = np.zeros((self.num_filters, *y.shape))
        for step in range(1, self.unroll_steps + 1):
            resid = y3 - correlate2d(code, wd)
            code, finite = _kernels.shrink_add(code, correlate2d(resid, we), eps)
            if not finite:
                raise NonFiniteActivation(f"non-finite code after refinement step {step}")
        return correlate2d(code, wd)[0], code

    def estimate_array(self, noisy) -> np.ndarray:
        """Unclamped image estimate: raw decoder output or its exponential."""
        raw, _ = self.forward_arrays(noisy)
        return np.exp(raw) if self.exp_output else raw

    def denoise(self, noisy: ImageGrid) -> ImageGrid:
        """Inference-mode estimate clamped to [0, 1] for metrics and saving."""
        return ImageGrid(np.clip(self.estimate_array(noisy), 0.0, 1.0))


def _forward_gain(enc_w: np.ndarray, dec_w: np.ndarray,
                  probe_shape=(32, 32), iters: int = 40, seed: int = 0) -> float:
    """sigma_max of the image -> decode(encode(image)) composition."""
    rng = stream(seed, "probe")
    v = rng.standard_normal((1, *probe_shape))
    sigma2 = 0.0
    for _ in range(iters):
        v /= np.sqrt((v * v).sum())
        u = correlate2d(correlate2d(v, enc_w), dec_w)
        sigma2 = float((u * u).sum())
        v = correlate2d_adjoint(correlate2d_adjoint(u, dec_w), enc_w)
    return np.sqrt(sigma2)


def init_network(cfg: NetConfig) -> P2SNetwork:
    """Seeded scaled-uniform draw; decoder filters unit-normalized, encoder
    rescaled so the encode/decode composition is contractive."""
    m, k = cfg.num_filters, cfg.kernel_size
    rng = stream(cfg.weight_seed, "weights")
    enc = rng.uniform(-1.0, 1.0, size=(m, 1, k, k)) / np.sqrt(k * k)
    dec = rng.uniform(-1.0, 1.0, size=(1, m, k, k)) / np.sqrt(m * k * k)
    norms = np.sqrt((dec * dec).sum(axis=(2, 3), keepdims=True))
    dec = dec / np.maximum(norms, 1e-30)
    probe = (max(4 * k, 16), max(4 * k, 16))
    gain = _forward_gain(enc, dec, probe_shape=probe, seed=cfg.weight_seed)
    if gain > 0:
        enc *= cfg.spectral_target / gain
    encoder = KernelBank(enc, thresholds=np.full(m, cfg.threshold_init), name="encoder")
    decoder = KernelBank(dec, name="decoder")
    return P2SNetwork(encoder, decoder, cfg.unroll_steps, exp_output=cfg.exp_output)


def tied_network(dict_weights: np.ndarray, sparsity_weight: float,
                 step_size: float, unroll_steps: int) -> P2SNetwork:
    """Network that replays classical ISTA exactly: encoder = step * D^T,
    thresholds = sparsity_weight * step, raw output."""
    if dict_weights.ndim != 4 or dict_weights.shape[0] != 1:
        raise ValueError(f"dictionary must be (1, M, k, k), got {dict_weights.shape}")
    m = dict_weights.shape[1]
    enc = step_size * dict_weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    encoder = KernelBank(np.ascontiguousarray(enc),
                         thresholds=np.full(m, sparsity_weight * step_size),
                         name="encoder")
    decoder = KernelBank(dict_weights, name="decoder")
    return P2SNetwork(encoder, decoder, unroll_steps, exp_output=False)
