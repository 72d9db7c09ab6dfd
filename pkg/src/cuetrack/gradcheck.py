"""Finite-difference checks for every differentiable building block."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .association import AffinityHead, affinity, focal_loss, position_loss
from .cue_consistency import CueBlock, cue_cross_attention
from .geometric_encoder import GeometricLayer, GeometricTriplet, gia
from .numerics import Tensor
from .temporal_encoder import TemporalLayer, temporal_encode

TOLERANCE = 1e-4


def _leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)


def _scalar(build: Callable[[], Tensor], rng) -> Callable[[], Tensor]:
    """Turn a tensor-valued function into a random linear functional of it."""
    with nx.no_grad():
        shape = build().shape
    w = rng.normal(size=shape)
    return lambda: (build() * w).sum()


def _row_stochastic(rng, n):
    e = rng.random((n, n)) + 1e-3
    return e / e.sum(axis=1, keepdims=True)


def check_linear(rng):
    x, W, b = _leaf(rng, 3, 4), _leaf(rng, 4, 5), _leaf(rng, 5)
    return _scalar(lambda: nx.linear(x, W, b), rng), [x, W, b]


def check_mlp(rng):
    net = nx.MLP([4, 6, 5], rng)
    for p in net.parameters():
        p.data = rng.normal(size=p.shape)
    x = _leaf(rng, 3, 4)
    return _scalar(lambda: net(x), rng), [x, *net.parameters()]


def check_layer_norm(rng):
    x, g, b = _leaf(rng, 3, 6), _leaf(rng, 6), _leaf(rng, 6)
    return _scalar(lambda: nx.layer_norm(x, g, b), rng), [x, g, b]


def check_softmax(rng):
    x = _leaf(rng, 3, 5)
    mask = rng.random((3, 5)) < 0.7
    mask[:, 0] = True
    return _scalar(lambda: nx.softmax(x, -1, mask), rng), [x]


def check_attention(rng):
    Q, K, V, B = _leaf(rng, 3, 4), _leaf(rng, 5, 4), _leaf(rng, 5, 4), _leaf(rng, 3, 5)
    mask = rng.random((3, 5)) < 0.7
    mask[np.arange(3), rng.integers(0, 5, 3)] = True
    return _scalar(lambda: nx.attention(Q, K, V, mask, B)[0], rng), [Q, K, V, B]


def check_gia(rng, d=6):
    layer = GeometricLayer(d, 17, rng)
    k = int(rng.integers(1, 4))
    f, F, R = _leaf(rng, 2, 1, d), _leaf(rng, 2, k, d), _leaf(rng, 2, k, d)
    valid = np.ones((2, k), dtype=bool)
    valid[1, k - 1] = k == 1
    params = [layer.Wq, layer.WK, layer.WV, layer.WE, layer.WG, *layer.mlp_gia.parameters(),
              *layer.ln.parameters(), *layer.ffn.parameters(), f, F, R]
    return _scalar(lambda: gia(GeometricTriplet(f, F, R, valid), layer)[0], rng), params


def check_temporal(rng, d=6):
    layer = TemporalLayer(d, rng)
    T = int(rng.integers(1, 5))
    Z, token = _leaf(rng, T, d), _leaf(rng, 1, d)

    def run():
        z_hat, Z_hat, _ = temporal_encode(Z, token, layer)
        return nx.concat([z_hat.reshape(1, d), Z_hat], axis=0)

    return _scalar(run, rng), [Z, token, layer.WQ, layer.WK, layer.WV, *layer.ln.parameters()]


def check_cue_cross(rng, d=6):
    block = CueBlock(d, rng)
    M, N = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    Zm, ZB = _leaf(rng, M, d), _leaf(rng, N, d)
    Em, EB = _row_stochastic(rng, M), _row_stochastic(rng, N)
    mask = rng.random((M, N)) < 0.6

    def run():
        Ym, YB = cue_cross_attention(Zm, Em, ZB, EB, mask, block, k=3)
        return nx.concat([Ym, YB], axis=0)

    params = [Zm, ZB, *block.det_from_tracks.parameters(), *block.tracks_from_dets.parameters()]
    return _scalar(run, rng), params


def check_affinity(rng, d=6):
    head = AffinityHead(d, rng)
    Ym, YB = _leaf(rng, 3, d), _leaf(rng, 4, d)
    return _scalar(lambda: affinity(Ym, YB, head).A, rng), [Ym, YB, *head.parameters()]


def check_focal(rng):
    logits = _leaf(rng, 3, 4)
    gt = rng.random((3, 4)) < 0.3
    mask = rng.random((3, 4)) < 0.8
    mask[0, 0] = True
    gamma = float(rng.choice([0.0, 1.0, 2.0]))
    return (lambda: focal_loss(nx.sigmoid(logits), gt, mask, gamma=gamma)), [logits]


def check_smooth_l1(rng):
    pred = _leaf(rng, 4, 2, scale=1.5)
    target = rng.normal(size=(4, 2))
    sup = np.array([True, True, False, True])
    return (lambda: position_loss(pred, target, sup)), [pred]


CHECKS: dict[str, Callable] = {
    "linear": check_linear,
    "mlp": check_mlp,
    "layer_norm": check_layer_norm,
    "softmax": check_softmax,
    "attention": check_attention,
    "gia": check_gia,
    "temporal_encoder": check_temporal,
    "cue_cross_attention": check_cue_cross,
    "affinity": check_affinity,
    "focal_loss": check_focal,
    "smooth_l1": check_smooth_l1,
}


@dataclass
class CheckResult:
    name: str
    instances: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def run_gradchecks(seed: int = 0, instances: int = 20, corrupt: float = 0.0,
                   names=None) -> list[CheckResult]:
    """Run every registered check on ``instances`` random draws (64-bit)."""
    if nx.get_default_dtype() is not np.float64:
        raise RuntimeError("gradient checks need 64-bit tensors")
    results = []
    for name in names or CHECKS:
        worst = 0.0
        for i in range(instances):
            rng = np.random.default_rng([seed, i, len(name)])
            fn, params = CHECKS[name](rng)
            worst = max(worst, nx.gradient_check(fn, params, corrupt=corrupt))
        results.append(CheckResult(name, instances, worst))
    return results


def format_results(results: list[CheckResult]) -> str:
    lines = [f"{'check':<22}{'instances':>10}{'max rel err':>14}  status"]
    for r in results:
        lines.append(f"{r.name:<22}{r.instances:>10}{r.max_rel_error:>14.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
