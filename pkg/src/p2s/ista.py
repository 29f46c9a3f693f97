"""Classical convolutional ISTA: the non-learned baseline and exactness oracle.

Solves  min_A  0.5 * ||Y - D*A||^2 + lambda_s * ||A||_1  over an M-channel
code A, where D*A is a sum of per-channel same-size cross-correlations with
a fixed filter bank.  The iteration is

    A <- shrink(A + step * D^T * (Y - D * A),  lambda_s * step)

with step <= 1 / sigma_max(D^T D) estimated by power iteration.  The solver
shares its convolution arithmetic with the autodiff engine so the unrolled
network with tied weights reproduces it exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import correlate2d, correlate2d_adjoint, soft_threshold_array
from .imagecore import ImageGrid
from .rng import stream


class IstaDiverged(RuntimeError):
    """Objective turned non-finite; step size or dictionary is bad."""


def random_dictionary(num_filters: int, kernel_size: int = 3, seed: int = 0) -> np.ndarray:
    """Unit-l2-normalized Gaussian filters, shape (1, M, k, k)."""
    rng = stream(seed, "weights")
    w = rng.standard_normal((1, num_filters, kernel_size, kernel_size))
    norms = np.sqrt((w * w).sum(axis=(2, 3), keepdims=True))
    return w / norms


def dct_dictionary(num_filters: int, kernel_size: int = 3) -> np.ndarray:
    """First M two-dimensional DCT-II basis filters in frequency order."""
    k = kernel_size
    if num_filters > k * k:
        raise ValueError(f"at most {k * k} DCT filters exist at kernel size {k}")
    n = np.arange(k)
    basis = np.cos(np.pi * (n[:, None] + 0.5) * n[None, :] / k)  # (sample, freq)
    filters = []
    for fr, fc in sorted(((u, v) for u in range(k) for v in range(k)),
                         key=lambda t: (t[0] + t[1], t)):
        f = np.outer(basis[:, fr], basis[:, fc])
        filters.append(f / np.sqrt((f * f).sum()))
    return np.stack(filters[:num_filters])[None, :, :, :]


def power_iteration_max_eig(
    weights: np.ndarray,
    iters: int = 100,
    probe_shape: tuple[int, int] = (32, 32),
    seed: int = 0,
    return_trace: bool = False,
):
    """Largest eigenvalue of the code-space operator A -> D^T (D A).

    Returns the final Rayleigh-quotient estimate; with ``return_trace`` the
    nondecreasing per-iteration estimates come back too so convergence can
    be inspected.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if not np.any(weights):
        raise ValueError("zero dictionary has no spectral norm to estimate")
    m = weights.shape[1]
    rng = stream(seed, "probe")
    v = rng.standard_normal((m, *probe_shape))
    trace = []
    for _ in range(iters):
        norm = np.sqrt((v * v).sum())
        if norm == 0.0:
            raise IstaDiverged("power iteration probe collapsed to zero")
        v /= norm
        u = correlate2d(v, weights)
        trace.append(float((u * u).sum()))
        v = correlate2d_adjoint(u, weights)
    return (trace[-1], trace) if return_trace else trace[-1]


@dataclass(frozen=True)
class IstaProblem:
    """A fixed-dictionary sparse-coding problem on one image."""

    image: ImageGrid
    weights: np.ndarray  # (1, M, k, k)
    sparsity_weight: float
    step_size: float
    max_iters: int = 200
    tol: float = 1e-6

    def __post_init__(self):
        if self.weights.ndim != 4 or self.weights.shape[0] != 1:
            raise ValueError(f"dictionary must be (1, M, k, k), got {self.weights.shape}")
        if self.sparsity_weight < 0:
            raise ValueError("sparsity_weight must be nonnegative")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.max_iters < 1 or not self.tol > 0:
            raise ValueError("max_iters must be >= 1 and tol positive")

    @property
    def num_filters(self) -> int:
        return self.weights.shape[1]


def make_problem(
    image: ImageGrid,
    weights: np.ndarray,
    sparsity_weight: float,
    max_iters: int = 200,
    tol: float = 1e-6,
    power_iters: int = 100,
    safety: float = 0.99,
) -> IstaProblem:
    """Build a problem with step = safety / L, L from power iteration."""
    big_eig = power_iteration_max_eig(weights, iters=power_iters)
    return IstaProblem(
        image=image,
        weights=weights,
        sparsity_weight=float(sparsity_weight),
        step_size=safety / big_eig,
        max_iters=max_iters,
        tol=tol,
    )


def ista_step(code: np.ndarray, prob: IstaProblem) -> np.ndarray:
    """One shrinkage-thresholded gradient step on the sparse code."""
    if code.shape != (prob.num_filters, prob.image.height, prob.image.width):
        raise ValueError(f"code shape {code.shape} does not match problem")
    y = prob.image.data[None]
    resid = y - correlate2d(code, prob.weights)
    pre = code + prob.step_size * correlate2d_adjoint(resid, prob.weights)
    return soft_threshold_array(pre, prob.sparsity_weight * prob.step_size)


def objective(code: np.ndarray, prob: IstaProblem) -> float:
    resid = prob.image.data[None] - correlate2d(code, prob.weights)
    return float(0.5 * (resid * resid).sum()
                 + prob.sparsity_weight * np.abs(code).sum())


@dataclass
class IstaResult:
    code: np.ndarray
    reconstruction: ImageGrid
    trace: list = field(default_factory=list)  # rows: (iter, objective, residual, sparsity)

    def trace_csv(self) -> str:
        lines = ["iter,objective,residual,sparsity"]
        for it, obj, res, sp in self.trace:
            lines.append(f"{it},{obj!r},{res!r},{sp!r}")
        return "\n".join(lines) + "\n"


def run_ista(prob: IstaProblem) -> IstaResult:
    """Iterate to max-norm tolerance or the iteration cap; trace every step."""
    code = np.zeros((prob.num_filters, prob.image.height, prob.image.width))
    trace = []
    for it in range(1, prob.max_iters + 1):
        new_code = ista_step(code, prob)
        delta = float(np.abs(new_code - code).max())
        code = new_code
        resid = prob.image.data[None] - correlate2d(code, prob.weights)
        obj = float(0.5 * (resid * resid).sum()
                    + prob.sparsity_weight * np.abs(code).sum())
        if not np.isfinite(obj):
            raise IstaDiverged(f"objective non-finite at iteration {it}")
        trace.append((
            it,
            obj,
            float(np.sqrt((resid * resid).sum())),
            float(np.mean(code == 0.0)),
        ))
        if delta < prob.tol:
            break
    recon = correlate2d(code, prob.weights)[0]
    return IstaResult(code=code, reconstruction=ImageGrid(recon), trace=trace)
