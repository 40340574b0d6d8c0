"""Finite-difference verification of analytic gradients.

The checker perturbs every coordinate of the input with a central
difference and compares the result against what backward() produced.
The error metric is the largest coordinate discrepancy relative to the
scale of the gradient,

    err = max_i |a_i - n_i| / max(max|a|, max|n|, floor)

so coordinates whose true gradient is zero are judged against the
tensor's gradient magnitude instead of against finite-difference noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad

DEFAULT_EPS = 1e-5
DEFAULT_TOL = 1e-4
_ERROR_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    """Outcome of one finite-difference comparison."""

    max_rel_err: float
    passed: bool
    tol: float
    eps: float
    nonfinite_coords: list[tuple] = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.passed


class _DiffAccumulator:
    """Collects |a - n| and gradient scale over one or more leaves.

    The final error treats all leaves as one concatenated gradient
    vector: max coordinate discrepancy over the whole, divided by the
    whole vector's magnitude.
    """

    def __init__(self):
        self.abs_diff = 0.0
        self.scale = 0.0
        self.nonfinite: list[tuple] = []

    def add(self, analytic: np.ndarray, numeric: np.ndarray, leaf: int = 0) -> None:
        finite = np.isfinite(analytic) & np.isfinite(numeric)
        if not finite.all():
            for coord in np.argwhere(~finite):
                idx = tuple(int(c) for c in coord)
                self.nonfinite.append(((leaf,) + idx, float(analytic[idx]), float(numeric[idx])))
            return
        if analytic.size == 0:
            return
        self.abs_diff = max(self.abs_diff, float(np.abs(analytic - numeric).max()))
        self.scale = max(self.scale, float(np.abs(analytic).max()), float(np.abs(numeric).max()))

    def report(self, tol: float, eps: float) -> GradCheckReport:
        if self.nonfinite:
            return GradCheckReport(float("inf"), False, tol, eps, self.nonfinite)
        err = self.abs_diff / max(self.scale, _ERROR_FLOOR)
        return GradCheckReport(err, err <= tol, tol, eps)


def numeric_gradient(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Central-difference gradient of a scalar-valued tensor function."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    base = x.data.copy()
    grad = np.zeros_like(base)
    probe = Tensor(base.copy())
    with no_grad():
        for i in range(base.size):
            probe.data.reshape(-1)[i] = base.reshape(-1)[i] + eps
            hi = float(f(probe).data)
            probe.data.reshape(-1)[i] = base.reshape(-1)[i] - eps
            lo = float(f(probe).data)
            probe.data.reshape(-1)[i] = base.reshape(-1)[i]
            grad.reshape(-1)[i] = (hi - lo) / (2.0 * eps)
    return grad


def analytic_gradient(f: Callable[[Tensor], Tensor], x: Tensor) -> np.ndarray:
    """Gradient of f at x via one recorded forward and a backward pass."""
    leaf = Tensor(x.data.copy(), requires_grad=True)
    out = f(leaf)
    if out.data.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got output shape {out.data.shape}")
    if not out.requires_grad:
        return np.zeros_like(leaf.data)
    backward(out)
    return leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor,
               eps: float = DEFAULT_EPS, tol: float = DEFAULT_TOL) -> GradCheckReport:
    """Compare the analytic gradient of ``f`` at ``x`` to central differences."""
    accum = _DiffAccumulator()
    accum.add(analytic_gradient(f, x), numeric_gradient(f, x, eps))
    return accum.report(tol, eps)


def grad_check_many(f: Callable[..., Tensor], inputs: Sequence[Tensor],
                    eps: float = DEFAULT_EPS, tol: float = DEFAULT_TOL) -> GradCheckReport:
    """Check a pure multi-input function against each input in turn."""
    accum = _DiffAccumulator()
    frozen = [Tensor(t.data.copy()) for t in inputs]
    for i in range(len(inputs)):
        def partial(x, _i=i):
            args = list(frozen)
            args[_i] = x
            return f(*args)

        accum.add(analytic_gradient(partial, inputs[i]),
                  numeric_gradient(partial, inputs[i], eps), leaf=i)
    return accum.report(tol, eps)


def grad_check_leaves(loss_fn: Callable[[], Tensor], leaves: Sequence[Tensor],
                      eps: float = DEFAULT_EPS, tol: float = DEFAULT_TOL) -> GradCheckReport:
    """Check a closure against the live tensors it closes over.

    This is the module-level variant: ``leaves`` are the actual parameter
    (and input) tensors used inside ``loss_fn``, so stateful layers can be
    verified without re-plumbing their parameters. Leaf data is perturbed
    in place and restored afterwards.
    """
    for leaf in leaves:
        leaf.requires_grad = True
        leaf.grad = None
    loss = loss_fn()
    if loss.data.size != 1:
        raise ValueError(f"grad_check needs a scalar loss, got shape {loss.data.shape}")
    analytic = {}
    if loss.requires_grad:
        backward(loss)
    for leaf in leaves:
        analytic[id(leaf)] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        leaf.grad = None

    accum = _DiffAccumulator()
    with no_grad():
        for index, leaf in enumerate(leaves):
            numeric = np.zeros_like(leaf.data)
            for i in range(leaf.data.size):
                saved = leaf.data.flat[i]
                leaf.data.flat[i] = saved + eps
                hi = float(loss_fn().data)
                leaf.data.flat[i] = saved - eps
                lo = float(loss_fn().data)
                leaf.data.flat[i] = saved
                numeric.flat[i] = (hi - lo) / (2.0 * eps)
            accum.add(analytic[id(leaf)], numeric, leaf=index)
    return accum.report(tol, eps)


@dataclass
class SuiteResult:
    name: str
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed


def run_suite(tol: float = DEFAULT_TOL, eps: float = DEFAULT_EPS,
              include_model: bool = False) -> list[SuiteResult]:
    """Gradient checks for every primitive, the TDC layer, one transformer
    block, and the three losses, on small seeded random inputs.

    With ``include_model`` a whole toy network is verified as well (slower).
    """
    from . import convops, losses, model
    from . import tensor as T

    rng = np.random.default_rng(20240)
    results: list[SuiteResult] = []

    def record(name, fn, inputs):
        results.append(SuiteResult(name, grad_check_many(fn, list(inputs), eps, tol)))

    def rt(*shape, spread=1.0, offset=0.0):
        return Tensor(offset + spread * rng.standard_normal(shape))

    def rt_safe(*shape):
        # magnitudes in [0.2, 1.2] with random signs, away from relu/max kinks
        mag = 0.2 + rng.random(shape)
        sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
        return Tensor(mag * sign)

    a, b = rt(3, 4, 5), rt(3, 4, 5)
    bias = rt(4)
    record("add", lambda u, v: (u + v).sum(), (a, b))
    record("add_bias_broadcast", lambda u, v: (u + v.reshape((1, 4, 1))).sum(), (a, bias))
    record("sub", lambda u, v: (u - v).mean(), (a, b))
    record("mul", lambda u, v: (u * v).sum(), (a, b))
    record("mul_channel_broadcast", lambda u, v: (u * v.reshape((1, 4, 1))).sum(), (a, bias))
    record("div", lambda u, v: (u / v).sum(), (a, rt_safe(3, 4, 5)))
    record("neg", lambda u: (-u).sum(), (a,))
    record("power_square", lambda u: (u ** 2.0).sum(), (a,))
    record("power_sqrt", lambda u: (u ** 0.5).sum(), (Tensor(0.5 + rng.random((4, 4))),))
    record("exp", lambda u: T.exp(u).sum(), (rt(4, 3),))
    record("log", lambda u: T.log(u).sum(), (Tensor(0.5 + rng.random((4, 3))),))
    record("relu", lambda u: T.relu(u).sum(), (rt_safe(4, 5),))
    record("elu", lambda u: T.elu(u).sum(), (rt_safe(4, 5),))
    record("matmul", lambda u, v: (u @ v).sum(), (rt(4, 3), rt(3, 5)))
    record("matmul_batched", lambda u, v: (u @ v).sum(), (rt(2, 3, 4, 3), rt(2, 3, 3, 5)))
    record("matmul_shared_rhs", lambda u, v: (u @ v).sum(), (rt(2, 4, 3), rt(3, 5)))

    def probe(*shape):
        # fixed weights so the checked functions stay pure across calls
        return Tensor(rng.random(shape))

    w_soft, w_lsoft = probe(3, 6), probe(7)
    record("softmax", lambda u: (T.softmax(u, axis=1) * w_soft).sum(), (rt(3, 6),))
    record("log_softmax", lambda u: (T.log_softmax(u, axis=0) * w_lsoft).sum(), (rt(7),))
    record("mean", lambda u: u.mean((1, 2)).sum(), (rt(2, 3, 4),))
    record("sum_keepdims", lambda u: (u.sum((0,), keepdims=True) ** 2.0).sum(), (rt(3, 4),))
    record("reshape", lambda u: (u.reshape((6, 2)) ** 2.0).sum(), (rt(3, 4),))
    w_tr = probe(4, 2, 3)
    record("transpose", lambda u: (u.transpose((2, 0, 1)) * w_tr).sum(), (rt(2, 3, 4),))
    record("slice", lambda u: (u[1:, ::2] ** 2.0).sum(), (rt(4, 6),))
    record("concat", lambda u, v: (T.concat([u, v], axis=1) ** 2.0).sum(), (rt(2, 3), rt(2, 4)))
    w_ln = probe(2, 5, 3)
    record("layer_norm",
           lambda u, g_, b_: (T.layer_norm(u, g_, b_, axis=1) * w_ln).sum(),
           (rt(2, 5, 3), rt(5, offset=1.0, spread=0.2), rt(5)))
    stats_m, stats_v = rng.standard_normal(4), 0.5 + rng.random(4)
    w_bn = probe(2, 4, 3, 2, 2)
    record("batch_norm_inference",
           lambda u, g_, b_: (T.batch_norm_inference(u, g_, b_, stats_m, stats_v) * w_bn).sum(),
           (rt(2, 4, 3, 2, 2), rt(4, offset=1.0, spread=0.2), rt(4)))
    record("conv3d", lambda u, w_, b_: T.conv3d(u, w_, b_, (1, 1, 1), (1, 1, 1)).sum(),
           (rt(1, 2, 4, 5, 5), rt(3, 2, 3, 3, 3), rt(3)))
    record("conv3d_strided", lambda u, w_: T.conv3d(u, w_, None, (2, 2, 2), (0, 1, 1)).sum(),
           (rt(1, 2, 5, 6, 6), rt(2, 2, 3, 3, 3)))
    record("conv3d_depthwise", lambda u, w_: T.conv3d(u, w_, None, (1, 1, 1), (1, 1, 1), depthwise=True).sum(),
           (rt(1, 3, 4, 4, 4), rt(3, 1, 3, 3, 3)))
    w_pool = probe(1, 2, 3, 2, 2)
    record("maxpool_spatial", lambda u: (T.maxpool_spatial(u) * w_pool).sum(), (rt(1, 2, 3, 4, 4),))
    record("avgpool3d", lambda u: (T.avgpool3d(u, (2, 2, 2)) ** 2.0).sum(), (rt(1, 2, 5, 4, 4),))
    w_rep, w_pad = probe(1, 2, 9, 2, 2), probe(1, 2, 6, 2, 2)
    record("repeat_temporal", lambda u: (T.repeat_temporal(u, 3) * w_rep).sum(), (rt(1, 2, 3, 2, 2),))
    record("pad_temporal_replicate",
           lambda u: (T.pad_temporal_replicate(u, 1) * w_pad).sum(), (rt(1, 2, 4, 2, 2),))

    # temporal difference convolution, gradient through input and weights
    def tdc_sum(u, w_, b_):
        params = convops.Conv3dParams(weight=w_, bias=b_, stride=(1, 1, 1), padding=(1, 1, 1))
        return convops.tdc(u, convops.TdcParams(conv=params, theta=0.7)).sum()

    record("tdc_layer", tdc_sum, (rt(1, 2, 5, 4, 4), rt(3, 2, 3, 3, 3, spread=0.4), rt(3)))

    # spatio-temporal feed-forward sub-layer and one whole transformer block
    arch = model.ArchConfig(num_blocks=1, num_heads=2, embed_dim=8, ff_dim=12,
                            theta=0.7, tau=2.0, tube=(1, 1, 1), input_shape=(4, 16, 16))
    block = model.TransformerBlock(arch, np.random.default_rng(7), index=0)
    tokens = rt(1, 8, 4, 2, 2, spread=0.5)
    probe_ff = Tensor(rng.random((1, 8, 4, 2, 2)))
    probe_blk = Tensor(rng.random((1, 8, 4, 2, 2)))
    ff_leaves = [tokens] + [p for name, p in block.named_parameters("blk")
                            if ".ff_" in name or ".ln2." in name]
    blk_leaves = [tokens] + [p for _, p in block.named_parameters("blk")]
    results.append(SuiteResult("st_ff", grad_check_leaves(
        lambda: (block.feed_forward(tokens, training=True) * probe_ff).sum(),
        ff_leaves, eps, tol)))
    results.append(SuiteResult("transformer_block", grad_check_leaves(
        lambda: (block(tokens, training=True)[0] * probe_blk).sum(),
        blk_leaves, eps, tol)))

    # losses with respect to the predicted signal
    target = np.sin(2 * np.pi * 1.4 * np.arange(32) / 20.0) + 0.1 * rng.standard_normal(32)
    pred0 = Tensor(rng.standard_normal(32))
    record("neg_pearson", lambda u: losses.neg_pearson(u, target), (pred0,))
    record("freq_ce_of_psd", lambda u: losses.freq_ce_loss(losses.psd_at_classes(u, 20.0), 90), (pred0,))
    dist = losses.label_distribution(90, 1.0)
    record("ld_of_psd", lambda u: losses.ld_loss(dist, losses.psd_at_classes(u, 20.0)), (pred0,))

    if include_model:
        results.append(SuiteResult("full_model_toy", model_grad_check(eps=eps, tol=max(tol, 1e-3))))
    return results


def model_grad_check(eps: float = DEFAULT_EPS, tol: float = 1e-3) -> GradCheckReport:
    """Finite-difference check of a whole toy network, input and parameters."""
    from . import model
    from .losses import neg_pearson

    arch = model.ArchConfig(num_blocks=1, num_heads=2, embed_dim=8, ff_dim=12,
                            theta=0.7, tau=2.0, tube=(4, 2, 2), input_shape=(8, 16, 16))
    rng = np.random.default_rng(99)
    net = model.PhysFormer(arch, rng)
    video = Tensor(0.5 * rng.standard_normal((1, 3, 8, 16, 16)))
    target = np.sin(2 * np.pi * np.arange(8) / 5.0) + 0.05 * rng.standard_normal(8)
    leaves = [video] + [p for _, p in net.named_parameters()]

    def loss_fn():
        signal, _ = net.forward(video, training=True)
        return neg_pearson(signal[0], target)

    return grad_check_leaves(loss_fn, leaves, eps, tol)
