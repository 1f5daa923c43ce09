"""Finite-difference checks of every primitive and of the full training loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import SleepModel, preset
from .trainer import FrozenSnapshot, ReplayBatch, generate_replay, total_loss

TOLERANCE = 1e-4
STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    seed: int
    max_rel_error: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _leaf(rng, shape, positive=False):
    x = rng.normal(size=shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


def _primitive_cases(rng):
    """name -> (loss closure, leaves)."""
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (4, 2))
    x, k = _leaf(rng, (2, 3, 8, 8)), _leaf(rng, (4, 3, 3, 3))
    u, v = _leaf(rng, (5, 4)), _leaf(rng, (4,))
    pos = _leaf(rng, (5, 4), positive=True)
    w = Tensor(rng.normal(size=(5, 4)))
    mu, lv = _leaf(rng, (6,)), _leaf(rng, (6,))
    noise = rng.normal(size=6)
    labels = rng.integers(0, 3, size=5)
    mask = np.array([True, True, True, False])
    t = np.abs(rng.normal(size=(5, 4)))
    t[:, ~mask] = 0
    t /= t.sum(axis=1, keepdims=True)
    sm = lambda y: ad.sum_(ad.mul(y, w))
    return {
        "matmul": (lambda: ad.sum_(ad.mul(ad.matmul(a, b), Tensor(np.arange(6.0).reshape(3, 2)))), [a, b]),
        "conv2d_stride1": (lambda: ad.sum_(ad.square(ad.conv2d(x, k, 1))), [x, k]),
        "conv2d_stride2": (lambda: ad.sum_(ad.square(ad.conv2d(x, k, 2))), [x, k]),
        "add_broadcast": (lambda: sm(ad.square(ad.add(u, v))), [u, v]),
        "sub": (lambda: sm(ad.square(ad.sub(u, v))), [u, v]),
        "mul": (lambda: sm(ad.mul(u, pos)), [u, pos]),
        "scale": (lambda: sm(ad.scale(u, -2.5)), [u]),
        "exp": (lambda: sm(ad.exp(u)), [u]),
        "log": (lambda: sm(ad.log(pos)), [pos]),
        "relu": (lambda: sm(ad.relu(u)), [u]),
        "sum_axis": (lambda: ad.sum_(ad.square(ad.sum_(u, axis=1))), [u]),
        "mean": (lambda: ad.sum_(ad.square(ad.mean(u, axis=0))), [u]),
        "softmax": (lambda: sm(ad.softmax(u)), [u]),
        "softmax_masked": (lambda: sm(ad.softmax(u, mask)), [u]),
        "log_softmax": (lambda: sm(ad.log_softmax(u)), [u]),
        "cross_entropy": (lambda: ad.cross_entropy(u, labels, mask), [u]),
        "soft_cross_entropy": (lambda: ad.soft_cross_entropy(u, t, mask, 2.0), [u]),
        "gaussian_sample": (lambda: ad.sum_(ad.square(ad.gaussian_sample(mu, lv, noise))), [mu, lv]),
    }


def check_primitives(seed: int) -> list[CheckResult]:
    out = []
    with ad.default_dtype(np.float64):
        rng = np.random.default_rng(seed)
        for name, (f, leaves) in _primitive_cases(rng).items():
            errs = ad.grad_check(f, leaves, max_entries=20, step=STEP, rng=np.random.default_rng(seed))
            out.append(CheckResult(name, seed, max(errs)))
    return out


def check_full_loss(seed: int, task: int = 2, batch: int = 4, entries: int = 8) -> CheckResult:
    """L = L^C + L^G of the desk model at task ``task`` with generative replay, float64."""
    with ad.default_dtype(np.float64):
        cfg = preset("desk")
        model = SleepModel(cfg, seed=seed, dtype=np.float64)
        rng = np.random.default_rng(seed)
        prev_mask = np.zeros(cfg.num_classes, bool)
        prev_mask[: 2 * (task - 1)] = True
        active = np.zeros(cfg.num_classes, bool)
        active[: 2 * task] = True
        snapshot = FrozenSnapshot.capture(model, task - 1, prev_mask)
        # perturb the live model so it differs from its snapshot
        for p in model.parameters().values():
            p.data += 0.01 * rng.normal(size=p.shape)
        ver = ReplayBatch(rng.normal(size=(batch, cfg.feature_length)),
                          rng.integers(2 * (task - 1), 2 * task, size=batch), "veridical")
        gen = generate_replay(snapshot, batch, rng)
        params = list(model.parameters().values())

        def f():
            return total_loss(model, ver, gen, task, active, np.random.default_rng(seed + 1),
                              temperature=2.0, kl_weight=1.0 / cfg.feature_length).total

        errs = ad.grad_check(f, params, max_entries=entries, step=STEP, rng=np.random.default_rng(seed))
    return CheckResult("full_loss", seed, max(errs))


def run_all(seeds=range(10)) -> list[CheckResult]:
    results = []
    for s in seeds:
        results += check_primitives(s)
        results.append(check_full_loss(s))
    return results
