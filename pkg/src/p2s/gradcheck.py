"""Finite-difference verification suite behind the ``gradcheck`` command.

Every differentiable operator and the full training loss are checked
against central differences (h = 1e-6, 64-bit).  Two caveats make the
checks exact rather than approximate:

* the gradient-detached full-image branch of the neighbor loss is frozen
  at the base point, because that is the function backward differentiates;
* parameters whose perturbation flips any shrinkage active set or L1 sign
  are excluded, detected by comparing masks at the two perturbed points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import correlate2d, soft_threshold_array
from .imagecore import ImageGrid
from .network import NetConfig, P2SNetwork, init_network
from .rng import stream
from .trainer import loss_l1, loss_poisson, neighbor_downsample

FD_STEP = 1e-6
REL_TOL = 1e-5
# Gradients are order 1e-2..1 here; the floor keeps FD roundoff on a
# near-zero component from masquerading as a relative error.
_DENOM_FLOOR = 1e-4
MU_N = 2.0


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    checked: int
    excluded: int
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"[{status}] {self.name}: max_rel_err={self.max_rel_err:.3e} "
                f"over {self.checked} params ({self.excluded} near kinks excluded)")


def _rel_err(analytic: float, numeric: float) -> float:
    denom = max(abs(analytic), abs(numeric), _DENOM_FLOOR)
    return abs(analytic - numeric) / denom


def _central_diff(f, param: np.ndarray, flat_index: int, h: float = FD_STEP) -> float:
    flat = param.reshape(-1)
    keep = flat[flat_index]
    flat[flat_index] = keep + h
    hi = f()
    flat[flat_index] = keep - h
    lo = f()
    flat[flat_index] = keep
    return (hi - lo) / (2.0 * h)


def check_elementwise(seed: int = 0) -> CheckResult:
    """exp/mul/sub/add/abs/mean gradients on random data (kinks avoided)."""
    rng = stream(seed, "probe")
    x = ad.parameter(rng.uniform(0.2, 1.5, size=(2, 5, 5)), name="x")
    y = ad.parameter(rng.uniform(0.2, 1.5, size=(2, 5, 5)), name="y")

    def loss_value() -> float:
        a = ad.mul(ad.exp(ad.scale(x, 0.5)), y)
        b = ad.absolute(ad.sub(a, ad.add(x, y)))
        return float(ad.mean(b).values)

    a = ad.mul(ad.exp(ad.scale(x, 0.5)), y)
    b = ad.absolute(ad.sub(a, ad.add(x, y)))
    ad.backward(ad.mean(b))

    worst = 0.0
    checked = 0
    for node in (x, y):
        grad = node.grad.reshape(-1)
        for i in range(node.values.size):
            fd = _central_diff(loss_value, node.values, i)
            worst = max(worst, _rel_err(grad[i], fd))
            checked += 1
    return CheckResult("elementwise ops", worst, checked, 0, worst <= REL_TOL)


def check_conv(seed: int = 0) -> CheckResult:
    """conv2d gradients w.r.t. input and weights."""
    rng = stream(seed, "probe")
    x = ad.parameter(rng.standard_normal((2, 6, 6)), name="x")
    bank = ad.KernelBank(rng.standard_normal((3, 2, 3, 3)), name="w")

    def loss_value() -> float:
        out = ad.conv2d(x, bank)
        return float(ad.mean(ad.mul(out, out)).values)

    out = ad.conv2d(x, bank)
    ad.backward(ad.mean(ad.mul(out, out)))

    worst = 0.0
    checked = 0
    for node in (x, bank.weights):
        grad = node.grad.reshape(-1)
        for i in range(node.values.size):
            fd = _central_diff(loss_value, node.values, i)
            worst = max(worst, _rel_err(grad[i], fd))
            checked += 1
    return CheckResult("conv2d", worst, checked, 0, worst <= REL_TOL)


def check_conv_transpose_adjoint(seed: int = 0, trials: int = 20) -> CheckResult:
    """<conv(a), b> == <a, conv_transpose(b)> on random banks."""
    rng = stream(seed, "probe")
    worst = 0.0
    for _ in range(trials):
        c, o = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        k = int(rng.choice([1, 3, 5]))
        a = rng.standard_normal((c, 8, 8))
        b = rng.standard_normal((o, 8, 8))
        w = rng.standard_normal((o, c, k, k))
        lhs = float((correlate2d(a, w) * b).sum())
        rhs = float((a * ad.correlate2d_adjoint(b, w)).sum())
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), 1.0))
    return CheckResult("conv adjoint identity", worst, trials, 0, worst <= 1e-10)


def check_soft_threshold(seed: int = 0) -> CheckResult:
    """Shrinkage gradients w.r.t. input and thresholds, kink band excluded."""
    rng = stream(seed, "probe")
    xv = rng.standard_normal((3, 6, 6))
    eps = np.abs(rng.uniform(0.1, 0.5, size=3))
    x = ad.parameter(xv, name="x")
    t = ad.parameter(eps, name="eps")

    def loss_value() -> float:
        s = ad.soft_threshold(x, t)
        return float(ad.mean(ad.mul(s, s)).values)

    s = ad.soft_threshold(x, t)
    ad.backward(ad.mean(ad.mul(s, s)))

    gap = np.abs(np.abs(xv) - eps[:, None, None]).reshape(-1)
    worst = 0.0
    checked = excluded = 0
    for node in (x, t):
        grad = node.grad.reshape(-1)
        for i in range(node.values.size):
            if node is x and gap[i] < 1e-4:
                excluded += 1
                continue
            fd = _central_diff(loss_value, node.values, i)
            worst = max(worst, _rel_err(grad[i], fd))
            checked += 1
    return CheckResult("soft_threshold", worst, checked, excluded, worst <= REL_TOL)


class NetworkLossProbe:
    """Training loss on one small instance, with the detached branch frozen.

    The neighbor term's full-image pass is evaluated once at the base point
    and held constant during perturbation; backward treats it as a constant,
    so finite differences must too.
    """

    def __init__(self, seed: int, shape=(16, 16), num_filters=4, steps=3):
        self.net: P2SNetwork = init_network(NetConfig(
            num_filters=num_filters, kernel_size=3, unroll_steps=steps,
            weight_seed=seed, exp_output=True))
        rng = stream(seed, "noise")
        self.noisy = ImageGrid(rng.uniform(0.05, 1.0, size=shape))
        self.pair = neighbor_downsample(self.noisy, stream(seed, "pairs"))
        full_est = self.net.estimate_array(self.noisy)
        g1f, g2f = self.pair.apply(full_est)
        self.shift = (self.pair.g2_img.data + (g1f - g2f))[None]

    def _loss_node(self):
        raw, _ = self.net.forward(self.pair.g1_img.data)
        est = ad.exp(raw)
        lp = loss_poisson(raw, self.pair.g2_img.data)
        ll = loss_l1(est, self.pair.g2_img.data)
        diff = ad.sub(est, ad.constant(self.shift))
        ln = ad.mean(ad.mul(diff, diff))
        return ad.add(ad.add(lp, ll), ad.scale(ln, MU_N))

    def loss(self) -> float:
        return float(self._loss_node().values)

    def gradients(self) -> dict[str, np.ndarray]:
        ad.backward(self._loss_node())
        grads = {}
        for bank in self.net.banks():
            for p in bank.parameters():
                grads[p.name] = p.grad.copy()
                p.grad = None
        return grads

    def kink_signature(self) -> np.ndarray:
        """Active sets of every unroll step plus the L1 sign pattern."""
        we = self.net.encoder.weights.values
        wd = self.net.decoder.weights.values
        eps = self.net.encoder.thresholds.values
        y3 = self.pair.g1_img.data[None]
        code = np.zeros((self.net.num_filters, *self.pair.g1_img.shape))
        masks = []
        for _ in range(self.net.unroll_steps):
            pre = code + correlate2d(y3 - correlate2d(code, wd), we)
            code = soft_threshold_array(pre, eps)
            masks.append((code != 0.0).ravel())
        est = np.exp(correlate2d(code, wd))
        masks.append(np.sign(est - self.pair.g2_img.data[None]).ravel())
        return np.concatenate(masks)

    def parameters(self):
        return [p for bank in self.net.banks() for p in bank.parameters()]


def check_full_network(seeds=(0, 1, 2), min_params: int = 200) -> CheckResult:
    """Full training-loss gradient vs central differences, >= 200 parameters."""
    worst = 0.0
    checked = excluded = 0
    for seed in seeds:
        probe = NetworkLossProbe(seed)
        grads = probe.gradients()
        for p in probe.parameters():
            flat = p.values.reshape(-1)
            gflat = grads[p.name].reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + FD_STEP
                hi_sig = probe.kink_signature()
                hi = probe.loss()
                flat[i] = keep - FD_STEP
                lo_sig = probe.kink_signature()
                lo = probe.loss()
                flat[i] = keep
                if not np.array_equal(hi_sig, lo_sig):
                    excluded += 1
                    continue
                fd = (hi - lo) / (2.0 * FD_STEP)
                worst = max(worst, _rel_err(gflat[i], fd))
                checked += 1
    passed = worst <= REL_TOL and checked >= min_params
    return CheckResult("full network loss", worst, checked, excluded, passed)


def run_suite(seed: int = 0) -> list[CheckResult]:
    return [
        check_elementwise(seed),
        check_conv(seed),
        check_conv_transpose_adjoint(seed),
        check_soft_threshold(seed),
        check_full_network(seeds=(seed, seed + 1, seed + 2)),
    ]
