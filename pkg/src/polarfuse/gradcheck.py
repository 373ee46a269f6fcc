"""Finite-difference checks for every differentiable op and the composed fusion graph.

All cases run in float64 with central differences (step 1e-5). Inputs to
piecewise-linear ops are pushed away from their kinks so a step can never
straddle one.
"""
from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, List

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .bev import BevConfig
from .fusion import Detector, FusionConfig

TOLERANCE = 1e-4
STEP = 1e-5


@dataclass
class GradCase:
    name: str
    shape: tuple
    seed: int
    error: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def _away_from_zero(rng, shape, gap: float = 0.05) -> np.ndarray:
    x = rng.standard_normal(shape)
    return np.where(x >= 0, x + gap, x - gap)


def _p(name, values) -> Tensor:
    return ag.param(name, np.asarray(values, dtype=np.float64))


def _op_cases(rng, shape) -> List[tuple]:
    """(name, loss closure, params) for each primitive at one random shape."""
    H, W, C = shape
    a = _p("a", rng.standard_normal(shape))
    b = _p("b", rng.standard_normal(shape))
    kinked = _p("k", _away_from_zero(rng, shape))
    # fixed random projection turns any grid into a scalar with non-trivial gradients
    proj = rng.standard_normal(shape)

    def dot(t: Tensor) -> Tensor:
        return ag.sum_all(ag.mul(t, Tensor(proj)))

    cout = int(rng.integers(1, 5))
    w = _p("w", rng.standard_normal((C, cout)) * 0.5)
    bias = _p("bias", rng.standard_normal(cout))
    proj_out = rng.standard_normal((H, W, cout))
    target = rng.standard_normal(shape)
    soft = rng.uniform(0, 1, shape)
    weight = rng.uniform(0.5, 2.0, shape)
    mask = rng.uniform(size=(H, W)) < 0.5
    mask.flat[0] = True
    far = Tensor(target)
    # l1 kinks at a == target: keep the difference away from zero
    l1_in = _p("l", target + _away_from_zero(rng, shape))
    split = int(rng.integers(0, C))
    c2 = int(rng.integers(1, 4))
    extra = _p("e", rng.standard_normal((H, W, c2)))

    return [
        ("add", lambda: dot(ag.add(a, b)), [a, b]),
        ("sub", lambda: dot(ag.sub(a, b)), [a, b]),
        ("mul", lambda: dot(ag.mul(a, b)), [a, b]),
        ("scale", lambda: dot(ag.scale(a, -1.7)), [a]),
        ("relu", lambda: dot(ag.relu(kinked)), [kinked]),
        ("sigmoid", lambda: dot(ag.sigmoid(ag.scale(a, 3.0))), [a]),
        ("exp", lambda: dot(ag.exp(ag.scale(a, 0.5))), [a]),
        ("conv1x1", lambda: ag.sum_all(ag.mul(ag.conv1x1(a, w, bias), Tensor(proj_out))), [a, w, bias]),
        ("concat_channels", lambda: ag.sum_all(ag.mul(ag.concat_channels(a, extra),
                                                      Tensor(np.concatenate([proj, proj[..., :1].repeat(c2, -1)], -1)))),
         [a, extra]),
        ("slice_channels", lambda: ag.sum_all(ag.slice_channels(ag.mul(a, b), split, C)), [a, b]),
        ("sum_all", lambda: ag.sum_all(ag.mul(a, a)), [a]),
        ("mean_all", lambda: ag.mean_all(ag.mul(a, b)), [a, b]),
        ("mse_mean", lambda: ag.mse(a, far, "mean"), [a]),
        ("mse_sum", lambda: ag.mse(a, b, "sum"), [a, b]),
        ("l1_mean", lambda: ag.l1(l1_in, far, "mean"), [l1_in]),
        ("l1_sum", lambda: ag.l1(l1_in, far, "sum"), [l1_in]),
        ("bce_with_logits", lambda: ag.bce_with_logits(ag.scale(a, 2.0), soft, weight), [a]),
        ("bce_normalized", lambda: ag.bce_with_logits(a, soft, weight, 3.0), [a]),
        ("masked_l1", lambda: ag.masked_l1(l1_in, target, mask), [l1_in]),
    ]


@contextmanager
def _kink_probe():
    """Record the distance of every relu input and masked-L1 residual from its kink."""
    seen: List[float] = []
    relu, masked = ag.relu, ag.masked_l1

    def probe_relu(a):
        seen.append(float(np.min(np.abs(a.data))))
        return relu(a)

    def probe_masked(pred, target, mask):
        seen.append(float(np.min(np.abs(pred.data - target)[mask], initial=np.inf)))
        return masked(pred, target, mask)

    ag.relu, ag.masked_l1 = probe_relu, probe_masked
    try:
        yield seen
    finally:
        ag.relu, ag.masked_l1 = relu, masked


def _composed_case(rng, seed: int, kind: str = "deep", K: int = 2, margin: float = 1e-3):
    """Detector with camera adapter, fusion, head and psi, under detection + mimic losses.

    Draws are repeated until no relu input or L1 residual sits within
    ``margin`` of its kink, where the derivative is undefined.
    """
    for attempt in range(50):
        fn, params = _draw_composed(rng, seed * 100 + attempt, kind, K)
        with _kink_probe() as seen:
            fn()
        if min(seen) > margin:
            return fn, params
    raise RuntimeError("could not draw a kink-free composed case")


def _draw_composed(rng, seed: int, kind: str, K: int):
    """Deep fusion detector + psi + detection and mimic losses on a tiny grid."""
    from .bev import DetectionTarget
    from .training import TrainConfig, detection_loss, sim_loss

    bev = BevConfig(x_range=(0.0, 1.8), y_range=(-0.9, 0.9), cell=0.6, c_l=6, c_c=3)
    model = Detector(bev, FusionConfig(K=K, hidden=5, kind=kind), np.random.default_rng(seed),
                     dtype=np.float64, camera_adapter=True, head_hidden=5)
    # zero biases put dead-cell pre-activations exactly on the relu kink
    for p in model.parameters():
        if p.name.endswith(".bias") and p.name != "head.out.bias":
            p.data = _away_from_zero(rng, p.shape, 0.05) * 0.3
    model.head.out.weight.data *= 3.0
    from .bev import context_channels

    H, W = bev.H, bev.W
    lidar = rng.uniform(0, 1, (H, W, context_channels()))
    camera = rng.uniform(0, 1, (H, W, bev.c_c))
    n_cls = len(bev.classes)
    ii, jj = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    heat = np.zeros((H, W, n_cls))
    heat[..., int(rng.integers(n_cls))] = 0.05 * np.exp(-((ii - 1) ** 2 + (jj - 1) ** 2) / (2 * 0.75 ** 2))
    mask = np.zeros((H, W), dtype=bool)
    mask[1, 1] = True
    reg = 0.1 * rng.standard_normal((H, W, 6))
    target = DetectionTarget(heat, reg, mask)
    f_star = rng.uniform(0, 1, (H, W, bev.c_l))
    cfg = TrainConfig()

    def loss():
        f, out = model.forward(lidar, camera)
        total, _, _ = detection_loss(out, target, cfg)
        return ag.add(total, ag.scale(sim_loss(f, f_star, model.psi, "L2", "mean"), 1.0))

    return loss, model.parameters()


def run_suite(n_shapes: int = 20, seed: int = 0, include_composed: bool = True,
              log: Callable[[str], None] = None) -> List[GradCase]:
    """Run every op case at ``n_shapes`` random shapes plus composed-graph cases."""
    out: List[GradCase] = []
    for k in range(n_shapes):
        rng = np.random.default_rng([seed, k])
        shape = (int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 5)))
        for name, fn, params in _op_cases(rng, shape):
            case = GradCase(name, shape, k, ag.check_gradients(fn, params, STEP))
            out.append(case)
            if log:
                log(f"{name}\t{shape}\t{k}\t{case.error:.3e}")
    if include_composed:
        kinds = ["deep", "deep", "sum", "concat"]
        for k in range(n_shapes):
            kind = kinds[k % len(kinds)]
            rng = np.random.default_rng([seed, 1000 + k])
            fn, params = _composed_case(rng, seed + k, kind, K=1 + k % 3)
            case = GradCase(f"composed_{kind}", (3, 3), k, ag.check_gradients(fn, params, STEP))
            out.append(case)
            if log:
                log(f"{case.name}\t{case.shape}\t{k}\t{case.error:.3e}")
    return out


def summarize(cases: List[GradCase]) -> str:
    lines = ["op\tshape\tseed\tmax_rel_err\tstatus"]
    for c in cases:
        lines.append(f"{c.name}\t{'x'.join(map(str, c.shape))}\t{c.seed}\t{c.error:.3e}\t"
                     f"{'ok' if c.passed else 'FAIL'}")
    return "\n".join(lines) + "\n"


if __name__ == "__main__":
    t0 = time.time()
    cases = run_suite()
    print(summarize(cases))
    print(f"{sum(c.passed for c in cases)}/{len(cases)} passed in {time.time() - t0:.1f}s")
