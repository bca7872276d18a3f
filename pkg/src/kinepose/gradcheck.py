"""Finite-difference checks for every differentiable op, the KMM and the full pipeline."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import numeric_core as nc
from . import rng as rngmod
from .kmm import KmmParams, kmm_forward
from .network import forward_sequence, init_params
from .numeric_core import Tensor, grad_check

OP_TOL = 1e-5
PIPELINE_TOL = 1e-4
STEP = 1e-6


def _rand(g, *shape) -> Tensor:
    return Tensor(g.normal(size=shape))


def _against(g, f: Callable[[list[Tensor]], Tensor]) -> Callable[[list[Tensor]], Tensor]:
    # Reduce a tensor-valued op to a scalar via MSE against a fixed random target.
    cache = {}

    def scalar(args):
        out = f(args)
        if out.shape not in cache:
            cache[out.shape] = Tensor(g.normal(size=out.shape))
        return nc.mse_loss(out, cache[out.shape])

    return scalar


def op_cases(seed: int) -> dict[str, tuple[Callable, list[Tensor]]]:
    g = rngmod.stream(seed, "gradcheck/op")
    return {
        "matmul": (lambda a: nc.matmul(a[0], a[1]), [_rand(g, 3, 4), _rand(g, 4, 2)]),
        "softmax_rows": (lambda a: nc.softmax_rows(a[0], 1.7), [_rand(g, 4, 4)]),
        "convex_mix": (lambda a: nc.convex_mix(nc.softmax_rows(a[0]), a[1]), [_rand(g, 3, 4), _rand(g, 4, 5)]),
        "conv2d_1x1": (lambda a: nc.conv2d(a[0], a[1]), [_rand(g, 3, 4, 5), _rand(g, 2, 3, 1, 1)]),
        "conv2d_3x3": (lambda a: nc.conv2d(a[0], a[1]), [_rand(g, 2, 5, 4), _rand(g, 3, 2, 3, 3)]),
        "conv2d_3x3_stride2": (lambda a: nc.conv2d(a[0], a[1], stride=2), [_rand(g, 2, 6, 8), _rand(g, 3, 2, 3, 3)]),
        "relu": (lambda a: nc.relu(a[0]), [_rand(g, 3, 5)]),
        "mse_loss": (lambda a: nc.mse_loss(a[0], a[1]), [_rand(g, 2, 3, 3), _rand(g, 2, 3, 3)]),
        "add": (lambda a: nc.add(a[0], a[1]), [_rand(g, 3, 3), _rand(g, 3, 3)]),
        "scale": (lambda a: nc.scale(a[0], -2.5), [_rand(g, 4)]),
        "total": (lambda a: nc.total(a[0]), [_rand(g, 2, 3)]),
        "reshape": (lambda a: nc.reshape(a[0], (3, 4)), [_rand(g, 2, 6)]),
        "transpose": (lambda a: nc.transpose(a[0]), [_rand(g, 2, 5)]),
        "concat": (lambda a: nc.concat([a[0], a[1]]), [_rand(g, 1, 3, 3), _rand(g, 2, 3, 3)]),
    }


def check_ops(seed: int) -> dict[str, float]:
    g = rngmod.stream(seed, "gradcheck/op-target")
    results = {}
    for name, (f, args) in op_cases(seed).items():
        scalar = f if name in ("mse_loss", "total") else _against(g, f)
        results[name] = grad_check(scalar, args, STEP)
    return results


def check_kmm(seed: int, k: int = 3, d: int = 4, size: int = 8) -> float:
    """KMM forward on random size x size x d features, all inputs and weights."""
    g = rngmod.stream(seed, "gradcheck/kmm")
    args = [_rand(g, d, size, size), _rand(g, d, size, size), Tensor(g.random((k, size, size))),
            _rand(g, k, d, 1, 1), _rand(g, k, d, 1, 1)]
    target = Tensor(g.random((k, size, size)))

    def scalar(a):
        m_p, _ = kmm_forward(a[0], a[1], a[2], KmmParams(a[3], a[4]))
        return nc.mse_loss(m_p, target)

    return grad_check(scalar, args, STEP)


def check_pipeline(seed: int, coords: int = 8) -> float:
    """Sequence loss of a tiny model (K=2, D=4, 16x16, T=3) against all parameters."""
    from .training import sequence_loss

    g = rngmod.stream(seed, "gradcheck/pipeline")
    params = init_params(2, 4, "full", seed)
    names = params.names()
    frames = [Tensor(g.random((3, 16, 16))) for _ in range(3)]
    gt = [Tensor(g.random((2, 4, 4))) for _ in range(3)]

    def scalar(tensors):
        p = params.replace(dict(zip(names, tensors)))
        return sequence_loss(forward_sequence(frames, p), gt)

    return grad_check(scalar, [params.tensors[n] for n in names], STEP, coords=coords,
                      rng=rngmod.stream(seed, "gradcheck/coords"))


def run(scope: str, seeds: list[int]) -> tuple[float, float, dict[str, float]]:
    """Max error over ``seeds`` for ``scope``, its tolerance, and per-check maxima."""
    worst: dict[str, float] = {}
    for s in seeds:
        if scope == "op":
            found = check_ops(s)
        elif scope == "kmm":
            found = {"kmm_forward": check_kmm(s)}
        elif scope == "pipeline":
            found = {"pipeline": check_pipeline(s)}
        else:
            raise ValueError(f"unknown gradcheck scope {scope!r}")
        for name, err in found.items():
            worst[name] = max(worst.get(name, 0.0), err)
    tol = PIPELINE_TOL if scope == "pipeline" else OP_TOL
    return max(worst.values()), tol, worst
