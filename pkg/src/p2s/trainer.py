"""Self-supervised single-image training loop.

Each iteration draws a fresh neighbor-subsampled pair (g1, g2) from the
noisy image, runs the network on g1, and optimizes

    total = poisson + l1 + mu_n * neighbor

where ``poisson`` is the per-pixel event-count likelihood
mean(exp(raw) - target * raw), ``l1`` is the mean absolute reconstruction
error of the image estimate, and ``neighbor`` penalizes the mismatch
between the subsampled-then-denoised and denoised-then-subsampled views.
The full-resolution pass inside the neighbor term is gradient-detached;
without the detach the regularizer admits degenerate minima.

The two noisy half-images are different draws of (almost) the same signal,
so matching one against the other estimates the clean image without ever
seeing ground truth.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamOptimizer, ValueNode, backward
from .imagecore import ImageGrid, crop_even
from .network import NetConfig, P2SNetwork, init_network
from .noise_metrics import MetricReport, evaluate, psnr
from .rng import stream

# Raw activations above this make exp() meaningless; abort instead of
# silently producing inf.
_EXP_GUARD = 700.0


class TrainingDiverged(RuntimeError):
    """Loss or a gradient became non-finite.  Carries the failing iteration
    and the last finite parameter state for post-mortem checkpointing."""

    def __init__(self, message: str, iteration: int, last_good: dict | None = None):
        super().__init__(message)
        self.iteration = iteration
        self.last_good = last_good or {}


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 5500
    learning_rate: float = 1e-4
    mu_n: float = 2.0
    neighbor_block: int = 2
    seed: int = 0
    eval_every: int = 0  # 0 disables periodic metric rows and checkpoints
    use_poisson: bool = True
    use_l1: bool = True
    use_neighbor: bool = True

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.mu_n < 0:
            raise ValueError("mu_n must be nonnegative")
        if self.neighbor_block != 2:
            raise ValueError("only 2x2 neighbor blocks are supported")
        if self.eval_every < 0:
            raise ValueError("eval_every must be >= 0")


# The 8 ordered pairs of 4-adjacent pixels inside a 2x2 block, as
# (row, col) offsets of (first, second).  Order is part of the on-disk
# selection-map contract.
_BLOCK_PAIRS = np.array(
    [
        [[0, 0], [0, 1]],  # left-right
        [[0, 1], [0, 0]],
        [[1, 0], [1, 1]],
        [[1, 1], [1, 0]],
        [[0, 0], [1, 0]],  # top-bottom
        [[1, 0], [0, 0]],
        [[0, 1], [1, 1]],
        [[1, 1], [0, 1]],
    ],
    dtype=np.int64,
)


def apply_selection(selection: np.ndarray, arr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Apply a stored per-block pair choice to any image of the right size."""
    hb, wb = selection.shape
    if arr.shape != (2 * hb, 2 * wb):
        raise ValueError(f"selection map {selection.shape} needs a {2*hb}x{2*wb} image, "
                         f"got {arr.shape}")
    rows = 2 * np.arange(hb)[:, None]
    cols = 2 * np.arange(wb)[None, :]
    off = _BLOCK_PAIRS[selection]  # (hb, wb, 2, 2)
    g1 = arr[rows + off[..., 0, 0], cols + off[..., 0, 1]]
    g2 = arr[rows + off[..., 1, 0], cols + off[..., 1, 1]]
    return g1, g2


@dataclass(frozen=True)
class SubsamplePair:
    """Half-resolution views g1/g2 plus the per-block choices that made them."""

    g1_img: ImageGrid
    g2_img: ImageGrid
    selection_map: np.ndarray  # (H/2, W/2) codes into _BLOCK_PAIRS

    def apply(self, arr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return apply_selection(self.selection_map, arr)


def neighbor_downsample(img: ImageGrid, rng: np.random.Generator) -> SubsamplePair:
    """Pick one ordered adjacent pixel pair per 2x2 block, uniformly at random.

    Requires even dimensions; crop odd images first (the trainer crops the
    last row/column and keeps full-resolution passes uncropped).
    """
    h, w = img.height, img.width
    if h < 2 or w < 2:
        raise ValueError(f"image {img.shape} smaller than a 2x2 block")
    if h % 2 or w % 2:
        raise ValueError(f"image {img.shape} must have even dimensions; crop first")
    selection = rng.integers(0, 8, size=(h // 2, w // 2)).astype(np.uint8)
    g1, g2 = apply_selection(selection, img.data)
    return SubsamplePair(ImageGrid(g1), ImageGrid(g2), selection)


class LossOverflow(RuntimeError):
    """exp() would overflow; message names the peak activation."""


def _as_target(pred: ValueNode, target) -> np.ndarray:
    t = target.data if isinstance(target, ImageGrid) else np.asarray(target, dtype=np.float64)
    if t.ndim == 2:
        t = t[None]
    if t.shape != pred.values.shape:
        raise ValueError(f"target shape {t.shape} != prediction shape {pred.values.shape}")
    return t


def loss_poisson(pred: ValueNode, target) -> ValueNode:
    """mean(exp(pred) - target * pred): event-count likelihood, applied per pixel.

    Takes the raw network output; its exp() is the positivity-mapped image
    estimate, minimized exactly at exp(pred) = target.
    """
    t = _as_target(pred, target)
    peak = float(pred.values.max())
    if peak > _EXP_GUARD:
        raise LossOverflow(f"exp would overflow: max activation {peak:.3g} > {_EXP_GUARD:g}")
    return ad.mean(ad.sub(ad.exp(pred), ad.mul(ad.constant(t), pred)))


def loss_l1(pred: ValueNode, target) -> ValueNode:
    """Mean absolute difference; subgradient at zero is zero."""
    t = _as_target(pred, target)
    return ad.mean(ad.absolute(ad.sub(pred, ad.constant(t))))


def _predict(net: P2SNetwork, image2d: np.ndarray) -> tuple[ValueNode, ValueNode]:
    """Graph-recorded pass: (raw decoder output, image estimate) nodes."""
    raw, _ = net.forward(image2d)
    if not net.exp_output:
        return raw, raw
    if float(raw.values.max()) > _EXP_GUARD:
        raise LossOverflow(
            f"exp would overflow: max activation {float(raw.values.max()):.3g}"
        )
    return raw, ad.exp(raw)


def loss_neighbor(net: P2SNetwork, noisy: ImageGrid, pair: SubsamplePair,
                  pred: ValueNode | None = None) -> ValueNode:
    """Subsample-consistency regularizer.

    mean squared value of  f(g1(Y)) - g2(Y) - [g1(f(Y)) - g2(f(Y))]
    where the full-image pass f(Y) carries no gradient and g1/g2 reuse the
    pair's stored selection map.  Exactly zero when f is the identity.
    """
    even = crop_even(noisy)
    if pair.selection_map.shape != (even.height // 2, even.width // 2):
        raise ValueError("selection map does not match the noisy image")
    if pred is None:
        _, pred = _predict(net, pair.g1_img.data)
    full_est = net.estimate_array(noisy)  # plain arrays: detached by construction
    g1f, g2f = pair.apply(full_est[: even.height, : even.width])
    shift = pair.g2_img.data + (g1f - g2f)
    diff = ad.sub(pred, ad.constant(shift[None]))
    return ad.mean(ad.mul(diff, diff))


@dataclass
class TraceRow:
    iteration: int
    total: float
    poisson: float
    l1: float
    neighbor: float
    psnr_db: float | None = None


def trace_csv(rows: list[TraceRow]) -> str:
    lines = ["iter,total,poisson,l1,neighbor,psnr"]
    for r in rows:
        psnr_cell = "" if r.psnr_db is None else repr(r.psnr_db)
        lines.append(f"{r.iteration},{r.total!r},{r.poisson!r},{r.l1!r},"
                     f"{r.neighbor!r},{psnr_cell}")
    return "\n".join(lines) + "\n"


@dataclass
class DenoiseReport:
    """Result bundle: denoised image, loss trace, metrics, timing, config echo."""

    denoised: ImageGrid
    loss_trace: list[TraceRow]
    metrics: MetricReport | None
    wall_time: float
    net_config: NetConfig
    train_config: TrainConfig
    network: P2SNetwork | None = field(repr=False, default=None)


def _snapshot(net: P2SNetwork) -> dict[str, np.ndarray]:
    return {p.name: p.values.copy() for b in net.banks() for p in b.parameters()}


def train(
    noisy: ImageGrid,
    clean: ImageGrid | None = None,
    net_cfg: NetConfig | None = None,
    train_cfg: TrainConfig | None = None,
    checkpoint_path=None,
) -> DenoiseReport:
    """Optimize the network on one noisy image; see the module docstring.

    With ``clean`` given, PSNR rows are logged every ``eval_every`` iterations
    and final metrics are attached.  ``checkpoint_path`` additionally dumps
    the banks every ``eval_every`` iterations and at the end.
    """
    net_cfg = net_cfg or NetConfig()
    cfg = train_cfg or TrainConfig()
    start = time.perf_counter()

    net = init_network(net_cfg)
    opt = AdamOptimizer(net.banks(), learning_rate=cfg.learning_rate)
    rng = stream(cfg.seed, "pairs")
    even = crop_even(noisy)

    rows: list[TraceRow] = []
    last_good = _snapshot(net)

    def zero() -> ValueNode:
        return ad.constant(np.asarray(0.0))

    for it in range(1, cfg.iterations + 1):
        pair = neighbor_downsample(even, rng)
        try:
            raw, est = _predict(net, pair.g1_img.data)
            lp = loss_poisson(raw, pair.g2_img.data) if cfg.use_poisson else zero()
            ll = loss_l1(est, pair.g2_img.data) if cfg.use_l1 else zero()
            ln = (loss_neighbor(net, noisy, pair, pred=est)
                  if cfg.use_neighbor else zero())
            total = ad.add(ad.add(lp, ll), ad.scale(ln, cfg.mu_n))
            if not np.isfinite(total.values):
                raise TrainingDiverged(f"non-finite loss at iteration {it}", it, last_good)
            backward(total)
            opt.step()
        except (LossOverflow, ad.GradientError) as exc:
            raise TrainingDiverged(f"{exc} at iteration {it}", it, last_good) from exc
        opt.zero_grad()

        psnr_db = None
        if cfg.eval_every and it % cfg.eval_every == 0:
            if clean is not None:
                psnr_db = psnr(clean, net.denoise(noisy))
            if checkpoint_path is not None:
                ad.save_checkpoint(checkpoint_path, net.banks())
        rows.append(TraceRow(it, float(total.values), float(lp.values),
                             float(ll.values), float(ln.values), psnr_db))
        last_good = _snapshot(net)

    if checkpoint_path is not None:
        ad.save_checkpoint(checkpoint_path, net.banks())
    denoised = net.denoise(noisy)
    metrics = evaluate(clean, denoised) if clean is not None else None
    return DenoiseReport(
        denoised=denoised,
        loss_trace=rows,
        metrics=metrics,
        wall_time=time.perf_counter() - start,
        net_config=net_cfg,
        train_config=cfg,
        network=net,
    )
