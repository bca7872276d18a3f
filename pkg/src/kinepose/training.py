"""Heatmap-regression training with Adam over synthetic clips."""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .network import VARIANTS, ModelParams, SequenceOutput, forward_sequence, init_params, save_params
from .numeric_core import ShapeError, Tape, Tensor, add, mse_loss, scale
from .synthdata import PoseSequence, flip_sequence, load_dataset, render_gt_heatmaps

log = logging.getLogger(__name__)

METRICS_HEADER = "step,epoch,loss,holdout_mpck"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.005
    batch_size: int = 2
    T: int = 5
    epochs: int = 30
    seed: int = 0
    flip: bool = False
    checkpoint_interval: int = 0
    holdout: int = 10
    feature_dim: int = 32
    variant: str = "full"
    sigma: float = 2.0
    alpha: float = 0.2
    norm: str = "person"

    def __post_init__(self):
        positive = {"lr": self.lr, "batch_size": self.batch_size, "feature_dim": self.feature_dim,
                    "sigma": self.sigma}
        for name, value in positive.items():
            if not value > 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.T < 2:
            raise ValueError(f"T must be >= 2 so the KMM runs, got {self.T}")
        for name in ("epochs", "checkpoint_interval", "holdout"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.norm not in ("person", "torso"):
            raise ValueError(f"norm must be person or torso, got {self.norm!r}")

    @classmethod
    def from_mapping(cls, values: dict[str, str], base: "TrainConfig | None" = None) -> "TrainConfig":
        """Build from string values (config file / CLI); unknown keys are rejected."""
        base = base or cls()
        types = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(values) - set(types))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        parsed = {}
        for key, raw in values.items():
            kind = types[key]
            if kind == "bool":
                lowered = str(raw).strip().lower()
                if lowered not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(f"{key}: expected a boolean, got {raw!r}")
                parsed[key] = lowered in ("true", "1", "yes")
            elif kind == "int":
                parsed[key] = int(raw)
            elif kind == "float":
                parsed[key] = float(raw)
            else:
                parsed[key] = str(raw).strip()
        return replace(base, **parsed)


def parse_config_file(path) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


# ---------------------------------------------------------------------------
# Loss and optimizer


def sequence_loss(out: SequenceOutput, gt_heatmaps: list[Tensor]) -> Tensor:
    """Mean over frames of the per-frame heatmap MSE (final heatmaps only)."""
    if len(out.heatmaps) != len(gt_heatmaps):
        raise ShapeError(f"{len(out.heatmaps)} predicted frames vs {len(gt_heatmaps)} ground-truth frames")
    acc = None
    for pred, gt in zip(out.heatmaps, gt_heatmaps):
        term = mse_loss(pred, gt)
        acc = term if acc is None else add(acc, term)
    return scale(acc, 1.0 / len(gt_heatmaps))


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] | None = None
    v: dict[str, np.ndarray] | None = None


def adam_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r} at step {state.step + 1}")
    m_prev = state.m or {n: np.zeros_like(p) for n, p in params.items()}
    v_prev = state.v or {n: np.zeros_like(p) for n, p in params.items()}
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new_params, m, v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m[name] = b1 * m_prev[name] + (1.0 - b1) * g
        v[name] = b2 * v_prev[name] + (1.0 - b2) * (g * g)
        m_hat = m[name] / bc1
        v_hat = v[name] / bc2
        new_params[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, step=t, m=m, v=v)


# ---------------------------------------------------------------------------
# Training loop


def gt_heatmaps_for(seq: PoseSequence, sigma: float, start: int = 0, length: int | None = None) -> list[Tensor]:
    stop = seq.num_frames if length is None else start + length
    h, w = seq.height // 4, seq.width // 4
    return [Tensor(render_gt_heatmaps(seq.joints[t], h, w, sigma)) for t in range(start, stop)]


def loss_and_grads(params: ModelParams, frames: list[Tensor], gt: list[Tensor]) -> tuple[float, dict[str, np.ndarray]]:
    names = params.names()
    with Tape() as tape:
        loss = sequence_loss(forward_sequence(frames, params), gt)
    grads = tape.gradient(loss, [params.tensors[n] for n in names])
    return loss.item(), dict(zip(names, grads))


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("KINEPOSE_THREADS", "1")))
    except ValueError:
        return 1


def _batch_grads(params, items, pool):
    results = list(pool.map(lambda it: loss_and_grads(params, *it), items)) if pool else [
        loss_and_grads(params, *it) for it in items
    ]
    # Fixed reduction order keeps the sum reproducible whatever the thread schedule.
    total = {n: np.zeros(params.tensors[n].shape) for n in params.names()}
    losses = []
    for loss, grads in results:
        losses.append(loss)
        for n in total:
            total[n] += grads[n]
    count = len(items)
    return sum(losses) / count, {n: g / count for n, g in total.items()}


def split_dataset(seqs: list[PoseSequence], holdout: int) -> tuple[list[PoseSequence], list[PoseSequence]]:
    if holdout >= len(seqs):
        raise ValueError(f"holdout {holdout} leaves no training sequences out of {len(seqs)}")
    cut = len(seqs) - holdout
    return seqs[:cut], seqs[cut:]


def train(
    dataset_dir,
    cfg: TrainConfig,
    checkpoint_path,
    metrics_path,
    evaluate=None,
) -> ModelParams:
    """Train on the dataset, writing a ``.kim`` checkpoint and a metrics CSV.

    The last ``cfg.holdout`` sequences are held out. ``evaluate(params,
    holdout)`` returns the holdout mPCK logged at the end of each epoch;
    it defaults to person/torso PCK per ``cfg``.
    """
    try:
        seqs = load_dataset(dataset_dir)
    except (OSError, ValueError, KeyError) as exc:
        raise TrainingError(f"cannot read dataset {dataset_dir}: {exc}") from exc
    train_set, holdout = split_dataset(seqs, cfg.holdout)
    k = train_set[0].num_joints
    if any(s.num_frames < cfg.T for s in train_set):
        raise TrainingError(f"training clips must have at least T={cfg.T} frames")
    if evaluate is None:
        from .evaluation import PckConfig, evaluate_model

        pck_cfg = PckConfig(cfg.alpha, cfg.norm)

        def evaluate(p, hs):
            return evaluate_model(p, hs, pck_cfg).mpck

    params = init_params(k, cfg.feature_dim, cfg.variant, cfg.seed)
    state = AdamState(lr=cfg.lr)
    shuffle_rng = rngmod.stream(cfg.seed, "train/shuffle")
    window_rng = rngmod.stream(cfg.seed, "train/window")
    flip_rng = rngmod.stream(cfg.seed, "train/flip")
    checkpoint_path = Path(checkpoint_path)

    rows = [METRICS_HEADER]
    step = 0
    workers = _worker_count()
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = shuffle_rng.permutation(len(train_set))
            for start in range(0, len(order), cfg.batch_size):
                items = []
                for idx in order[start:start + cfg.batch_size]:
                    seq = train_set[int(idx)]
                    if cfg.flip and flip_rng.random() < 0.5:
                        seq = flip_sequence(seq)
                    t0 = int(window_rng.integers(0, seq.num_frames - cfg.T + 1))
                    frames = [Tensor(f) for f in seq.frames[t0:t0 + cfg.T]]
                    items.append((frames, gt_heatmaps_for(seq, cfg.sigma, t0, cfg.T)))
                loss, grads = _batch_grads(params, items, pool)
                if not math.isfinite(loss):
                    raise TrainingError(f"non-finite loss at step {step + 1}")
                arrays = {n: params.tensors[n].data for n in params.names()}
                arrays, state = adam_step(arrays, grads, state)
                params = params.replace({n: Tensor(a) for n, a in arrays.items()})
                step += 1
                last = start + cfg.batch_size >= len(order)
                mpck = ""
                if last and holdout:
                    mpck = repr(float(evaluate(params, holdout)))
                rows.append(f"{step},{epoch},{loss!r},{mpck}")
            log.info("epoch %d step %d loss %.6f holdout mPCK %s", epoch, step, loss, mpck or "-")
            if cfg.checkpoint_interval and epoch % cfg.checkpoint_interval == 0:
                _atomic_write(checkpoint_path.with_name(f"{checkpoint_path.stem}_epoch{epoch}{checkpoint_path.suffix}"),
                              lambda p: save_params(p, params))
    finally:
        if pool:
            pool.shutdown()

    _atomic_write(checkpoint_path, lambda p: save_params(p, params))
    _atomic_write(Path(metrics_path), lambda p: Path(p).write_text("\n".join(rows) + "\n"))
    return params


def _atomic_write(path: Path, writer) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    try:
        writer(tmp)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()
