"""PCK / mPCK metrics, model evaluation, occlusion sweep and ablations."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .network import ModelParams, forward_sequence
from .synthdata import OcclusionSpec, PoseSequence, apply_occlusion

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PckConfig:
    alpha: float = 0.2
    norm_mode: str = "person"

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.norm_mode not in ("person", "torso"):
            raise ValueError(f"norm_mode must be 'person' or 'torso', got {self.norm_mode!r}")


@dataclass
class MetricsReport:
    correct: np.ndarray  # per joint
    counts: np.ndarray  # per joint
    excluded_frames: int = 0

    @property
    def per_joint_pck(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.counts > 0, self.correct / np.maximum(self.counts, 1), np.nan)

    @property
    def mpck(self) -> float:
        n = int(self.counts.sum())
        return float(self.correct.sum()) / n if n else math.nan

    def merge(self, other: "MetricsReport") -> "MetricsReport":
        return MetricsReport(self.correct + other.correct, self.counts + other.counts,
                             self.excluded_frames + other.excluded_frames)

    def to_csv(self) -> str:
        lines = ["joint,pck"]
        lines += [f"{k},{v!r}" for k, v in enumerate(self.per_joint_pck.tolist())]
        lines.append(f"mpck,{self.mpck!r}")
        return "\n".join(lines) + "\n"


def argmax_joints(heatmaps: np.ndarray, stride: int = 4) -> np.ndarray:
    """K x 2 (x, y) image coordinates of each channel's first maximal cell."""
    hm = np.asarray(heatmaps)
    k, _, w = hm.shape
    flat = hm.reshape(k, -1).argmax(axis=1)  # first occurrence on ties
    rows, cols = np.divmod(flat, w)
    return np.stack([cols * stride, rows * stride], axis=1).astype(np.float64)


def normalization_lengths(seq: PoseSequence, mode: str) -> np.ndarray:
    if mode == "person":
        box = seq.bbox
        return np.maximum(box[:, 2] - box[:, 0], box[:, 3] - box[:, 1])
    a, b = seq.torso_pair
    return np.linalg.norm(seq.joints[:, a] - seq.joints[:, b], axis=1)


def pck(pred: np.ndarray, gt: PoseSequence, cfg: PckConfig) -> MetricsReport:
    """Per-joint and pooled PCK of ``pred`` (T x K x 2) against ``gt``.

    A joint counts as correct when distance / L <= alpha. Frames whose
    normalization length is zero are skipped and tallied in
    ``excluded_frames``. Occluded joints are scored like any other.
    """
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != gt.joints.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match ground truth {gt.joints.shape}")
    lengths = normalization_lengths(gt, cfg.norm_mode)
    keep = lengths > 0
    dist = np.linalg.norm(pred - gt.joints, axis=2)  # T x K
    # d <= alpha * L rather than d / L <= alpha keeps exact scale invariance.
    ok = dist[keep] <= cfg.alpha * lengths[keep, None]
    k = gt.num_joints
    return MetricsReport(ok.sum(axis=0).astype(np.int64), np.full(k, int(keep.sum()), dtype=np.int64),
                         int((~keep).sum()))


def predict_joints(params: ModelParams, seq: PoseSequence) -> np.ndarray:
    out = forward_sequence(seq.frame_tensors(), params)
    return np.stack([argmax_joints(m.data) for m in out.heatmaps])


def evaluate_model(params: ModelParams, seqs: list[PoseSequence], cfg: PckConfig) -> MetricsReport:
    report = None
    for seq in seqs:
        r = pck(predict_joints(params, seq), seq, cfg)
        report = r if report is None else report.merge(r)
    if report is None:
        raise ValueError("no sequences to evaluate")
    if report.excluded_frames:
        log.warning("%d frames excluded for zero normalization length", report.excluded_frames)
    return report


@dataclass
class SweepRow:
    occluded_count: int
    mpck_full: float
    mpck_identity: float


def occlusion_sweep(
    params: ModelParams,
    seqs: list[PoseSequence],
    counts: list[int],
    cfg: PckConfig,
    seed: int = 0,
    mask_size: int = 10,
    baseline: ModelParams | None = None,
) -> list[SweepRow]:
    """mPCK versus number of occluded joints, for the model and a no-KMM baseline.

    ``baseline`` is normally a separately trained ``identity_attention``
    model. Without one, the model's own weights are reused with the
    attention replaced by the identity.
    """
    k = seqs[0].num_joints
    bad = [c for c in counts if c < 0 or c > k]
    if bad:
        raise ValueError(f"occlusion counts {bad} outside 0..{k}")
    if baseline is None:
        baseline = params.with_variant("identity_attention")
    elif baseline.num_joints != params.num_joints:
        raise ValueError(f"baseline has K={baseline.num_joints}, model has K={params.num_joints}")
    rows = []
    for c in counts:
        spec = OcclusionSpec("count-sweep", mask_size=mask_size, count=c, seed=seed)
        occluded = [apply_occlusion(s, spec) for s in seqs]
        rows.append(SweepRow(c, evaluate_model(params, occluded, cfg).mpck,
                             evaluate_model(baseline, occluded, cfg).mpck))
    return rows


def sweep_to_csv(rows: list[SweepRow]) -> str:
    lines = ["occluded_count,mpck_full,mpck_identity"]
    lines += [f"{r.occluded_count},{r.mpck_full!r},{r.mpck_identity!r}" for r in rows]
    return "\n".join(lines) + "\n"


@dataclass
class AblationResult:
    variant: str
    params: ModelParams
    report: MetricsReport
    metrics_csv: Path = field(default=None)


def ablation_run(variant: str, dataset_dir, cfg, workdir, pck_cfg: PckConfig | None = None) -> AblationResult:
    """Train ``variant`` under ``cfg`` and score it on the holdout split."""
    from dataclasses import replace

    from .synthdata import load_dataset
    from .training import split_dataset, train

    workdir = Path(workdir)
    run_cfg = replace(cfg, variant=variant)
    ckpt = workdir / f"{variant}.kim"
    metrics = workdir / f"{variant}_metrics.csv"
    params = train(dataset_dir, run_cfg, ckpt, metrics)
    _, holdout = split_dataset(load_dataset(dataset_dir), cfg.holdout)
    pck_cfg = pck_cfg or PckConfig(cfg.alpha, cfg.norm)
    return AblationResult(variant, params, evaluate_model(params, holdout, pck_cfg), metrics)
