"""Synthetic moving-keypoint videos with optional occlusion masks.

Each clip shows K colored Gaussian blobs (one hue per joint) on a smooth
textured background. Joints start from a simple upright body template,
drift with a shared body velocity plus per-joint jitter and a small
random walk, and bounce off the frame borders.
"""
from __future__ import annotations

import colorsys
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .numeric_core import Tensor

BBOX_MARGIN = 4.0
OCCLUSION_MODES = ("none", "temporal", "spatial", "count-sweep")


@dataclass
class MotionConfig:
    body_speed: float = 1.5
    joint_speed: float = 0.5
    noise: float = 0.3
    body_scale: float = 1.0
    blob_sigma: float = 1.5
    # Explicit per-joint starts / velocities (K x 2, x then y) override the template.
    starts: np.ndarray | None = None
    velocities: np.ndarray | None = None


@dataclass
class PoseSequence:
    frames: list[np.ndarray]  # T arrays, 3 x H x W in [0, 1]
    joints: np.ndarray  # T x K x 2 (x, y) in pixels
    visible: np.ndarray  # T x K bool
    torso_pair: tuple[int, int]
    flip_pairs: list[tuple[int, int]]
    seed: int
    masks: list[tuple[int, int, int, int, int, int]] = field(default_factory=list)  # (t, k, x0, y0, x1, y1)
    box_margin: float = BBOX_MARGIN

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    @property
    def num_joints(self) -> int:
        return self.joints.shape[1]

    @property
    def height(self) -> int:
        return self.frames[0].shape[1]

    @property
    def width(self) -> int:
        return self.frames[0].shape[2]

    @property
    def bbox(self) -> np.ndarray:
        """T x 4 boxes (x_min, y_min, x_max, y_max) around the joints plus a fixed margin."""
        lo = self.joints.min(axis=1) - self.box_margin
        hi = self.joints.max(axis=1) + self.box_margin
        return np.concatenate([lo, hi], axis=1)

    def frame_tensors(self) -> list[Tensor]:
        return [Tensor(f) for f in self.frames]


@dataclass(frozen=True)
class OcclusionSpec:
    mode: str = "none"
    mask_size: int = 10
    count: int = 2
    seed: int = 0
    fill: float = 0.0

    def __post_init__(self):
        if self.mode not in OCCLUSION_MODES:
            raise ValueError(f"unknown occlusion mode {self.mode!r}; expected one of {OCCLUSION_MODES}")
        if self.mask_size < 1:
            raise ValueError(f"mask_size must be >= 1, got {self.mask_size}")
        if self.count < 0:
            raise ValueError(f"count must be >= 0, got {self.count}")


def body_template(k: int) -> tuple[np.ndarray, tuple[int, int], list[tuple[int, int]]]:
    """Offsets (K x 2) of an upright figure, its torso pair, and left/right pairs.

    Joint 0 is the head; the rest fill left/right rows top to bottom, with
    an odd one out placed on the midline.
    """
    offsets = [(0.0, -16.0)]
    pairs = []
    row = 0
    rest = k - 1
    while rest > 0:
        y = -6.0 + 14.0 * row
        half = 10.0 - 1.0 * row
        if rest >= 2:
            i = len(offsets)
            offsets += [(-half, y), (half, y)]
            pairs.append((i, i + 1))
            rest -= 2
        else:
            offsets.append((0.0, y))
            rest -= 1
        row += 1
    offsets = np.array(offsets[:k])
    if pairs:
        torso = (pairs[0][0], pairs[-1][1])
    else:
        torso = (0, k - 1)
    return offsets, torso, pairs


def _reflect(pos: np.ndarray, vel: np.ndarray, upper: np.ndarray) -> None:
    # Bounce in place off [0, upper]; repeat for steps larger than the box.
    upper = np.broadcast_to(upper, pos.shape)
    for _ in range(4):
        low = pos < 0
        pos[low] = -pos[low]
        vel[low] = -vel[low]
        high = pos > upper
        pos[high] = 2 * upper[high] - pos[high]
        vel[high] = -vel[high]
        if not (low.any() or high.any()):
            break
    np.clip(pos, 0, upper, out=pos)


def _background(g: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.empty((3, h, w))
    for c in range(3):
        acc = np.full((h, w), 0.35)
        for _ in range(3):
            fx, fy = g.uniform(-0.25, 0.25, size=2)
            phase = g.uniform(0, 2 * np.pi)
            acc += 0.06 * np.sin(fx * xx + fy * yy + phase)
        img[c] = acc
    img += g.normal(0.0, 0.02, size=img.shape)
    return img


def joint_colors(k: int) -> np.ndarray:
    return np.array([colorsys.hsv_to_rgb(i / k, 1.0, 1.0) for i in range(k)])


def render_frame(background: np.ndarray, joints: np.ndarray, blob_sigma: float) -> np.ndarray:
    _, h, w = background.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = background.copy()
    for color, (x, y) in zip(joint_colors(len(joints)), joints):
        a = np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * blob_sigma ** 2))
        img = img * (1 - a) + color[:, None, None] * a
    # Quantize to 8 bits so in-memory frames match the PPM files exactly.
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def generate_sequence(k: int, t: int, h: int, w: int, seed: int, motion: MotionConfig | None = None) -> PoseSequence:
    if k < 1 or t < 1:
        raise ValueError(f"need K >= 1 and T >= 1, got K={k}, T={t}")
    if h <= 0 or w <= 0 or h % 4 or w % 4:
        raise ValueError(f"frame size {h}x{w} must be positive and divisible by 4")
    motion = motion or MotionConfig()
    g = rngmod.stream(seed, "synth/motion")
    offsets, torso, pairs = body_template(k)
    upper = np.array([w - 1.0, h - 1.0])

    if motion.starts is not None:
        pos = np.array(motion.starts, dtype=np.float64).reshape(k, 2).copy()
    else:
        scale = motion.body_scale * g.uniform(0.9, 1.1)
        center = np.array([w / 2, h / 2]) + g.uniform(-0.1, 0.1, size=2) * np.array([w, h])
        pos = center + scale * offsets + g.normal(0.0, 1.0, size=(k, 2))
    if motion.velocities is not None:
        vel = np.array(motion.velocities, dtype=np.float64).reshape(k, 2).copy()
    else:
        angle = g.uniform(0, 2 * np.pi)
        body_v = motion.body_speed * np.array([np.cos(angle), np.sin(angle)])
        vel = body_v + motion.joint_speed * g.normal(0.0, 1.0, size=(k, 2))
    _reflect(pos, vel, upper)

    joints = np.empty((t, k, 2))
    for step in range(t):
        joints[step] = pos
        pos = pos + vel
        if motion.noise > 0:
            pos = pos + g.normal(0.0, motion.noise, size=(k, 2))
        _reflect(pos, vel, upper)

    bg = _background(rngmod.stream(seed, "synth/background"), h, w)
    frames = [render_frame(bg, joints[step], motion.blob_sigma) for step in range(t)]
    return PoseSequence(frames, joints, np.ones((t, k), dtype=bool), torso, pairs, seed)


def render_gt_heatmaps(joints: np.ndarray, h: int, w: int, sigma: float = 2.0, stride: int = 4) -> np.ndarray:
    """K x h x w Gaussian targets centred at joint / stride on the cell grid."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    joints = np.asarray(joints, dtype=np.float64)
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    cx = joints[:, 0, None, None] / stride
    cy = joints[:, 1, None, None] / stride
    return np.exp(-((u - cx) ** 2 + (v - cy) ** 2) / (2 * sigma ** 2))


def _square(x: float, y: float, size: int, h: int, w: int) -> tuple[int, int, int, int]:
    x0 = int(round(x)) - size // 2
    y0 = int(round(y)) - size // 2
    return max(x0, 0), max(y0, 0), min(x0 + size, w), min(y0 + size, h)


def apply_occlusion(seq: PoseSequence, spec: OcclusionSpec) -> PoseSequence:
    """Black out squares over chosen joints; frame 1 is never touched.

    temporal: one random frame in 2..T, ``count`` joints masked.
    spatial: ``count`` joints chosen once, masked in every frame 2..T.
    count-sweep: ``count`` distinct joints drawn afresh for each frame 2..T.
    Ground-truth joints are untouched; only pixels and visibility change.
    """
    if spec.mode == "none" or spec.count == 0 or seq.num_frames < 2:
        return seq
    k = seq.num_joints
    if spec.count > k:
        raise ValueError(f"cannot occlude {spec.count} joints of a {k}-joint pose")
    g = rngmod.stream(spec.seed, f"occlusion/{spec.mode}/{seq.seed}")
    t_all = seq.num_frames
    plan: dict[int, np.ndarray] = {}
    if spec.mode == "temporal":
        plan[int(g.integers(1, t_all))] = g.choice(k, size=spec.count, replace=False)
    elif spec.mode == "spatial":
        chosen = g.choice(k, size=spec.count, replace=False)
        plan = {t: chosen for t in range(1, t_all)}
    else:
        plan = {t: g.choice(k, size=spec.count, replace=False) for t in range(1, t_all)}

    frames = [f.copy() for f in seq.frames]
    visible = seq.visible.copy()
    masks = list(seq.masks)
    h, w = seq.height, seq.width
    for t, chosen in sorted(plan.items()):
        boxes = []
        for j in sorted(int(c) for c in chosen):
            x0, y0, x1, y1 = _square(*seq.joints[t, j], spec.mask_size, h, w)
            frames[t][:, y0:y1, x0:x1] = spec.fill
            boxes.append((x0, y0, x1, y1))
            masks.append((t, j, x0, y0, x1, y1))
        for j in range(k):
            px, py = np.round(seq.joints[t, j]).astype(int)
            if any(x0 <= px < x1 and y0 <= py < y1 for x0, y0, x1, y1 in boxes):
                visible[t, j] = False
    return replace(seq, frames=frames, visible=visible, masks=masks)


def flip_sequence(seq: PoseSequence) -> PoseSequence:
    """Mirror horizontally and swap left/right joint labels."""
    perm = np.arange(seq.num_joints)
    for a, b in seq.flip_pairs:
        perm[a], perm[b] = b, a
    joints = seq.joints[:, perm].copy()
    joints[..., 0] = (seq.width - 1) - joints[..., 0]
    frames = [f[:, :, ::-1].copy() for f in seq.frames]
    return replace(seq, frames=frames, joints=joints, visible=seq.visible[:, perm].copy(), masks=[])


# ---------------------------------------------------------------------------
# On-disk layout: seq_<n>/frame_<t>.ppm, gt.csv, meta.txt


def _write_ppm(path: Path, frame: np.ndarray) -> None:
    _, h, w = frame.shape
    pixels = np.round(frame * 255.0).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def _read_netpbm(path: Path, magic: bytes) -> np.ndarray:
    blob = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        end = pos
        while not blob[end:end + 1].isspace():
            end += 1
        tokens.append(blob[pos:end])
        pos = end
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} image, got {tokens[0]!r}")
    w, h, maxval = (int(x) for x in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit images are supported")
    channels = 3 if magic == b"P6" else 1
    data = np.frombuffer(blob[pos + 1:pos + 1 + w * h * channels], dtype=np.uint8)
    return data.reshape(h, w, channels)


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(Path(path), b"P6").transpose(2, 0, 1).astype(np.float64) / 255.0


def write_pgm(path, image: np.ndarray) -> None:
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.asarray(image, dtype=np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(Path(path), b"P5")[:, :, 0]


def write_sequence(directory, seq: PoseSequence) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(seq.frames):
        _write_ppm(d / f"frame_{t}.ppm", frame)
    with open(d / "gt.csv", "w") as fh:
        fh.write("t,k,x,y,visible\n")
        for t in range(seq.num_frames):
            for k in range(seq.num_joints):
                x, y = (float(v) for v in seq.joints[t, k])
                fh.write(f"{t},{k},{x!r},{y!r},{int(seq.visible[t, k])}\n")
    pairs = ";".join(f"{a}-{b}" for a, b in seq.flip_pairs)
    meta = {
        "K": seq.num_joints,
        "T": seq.num_frames,
        "H": seq.height,
        "W": seq.width,
        "seed": seq.seed,
        "torso_pair": f"{seq.torso_pair[0]},{seq.torso_pair[1]}",
        "flip_pairs": pairs,
    }
    (d / "meta.txt").write_text("".join(f"{key}={value}\n" for key, value in meta.items()))


def read_meta(path) -> dict[str, str]:
    meta = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    return meta


def read_sequence(directory) -> PoseSequence:
    d = Path(directory)
    meta = read_meta(d / "meta.txt")
    k, t = int(meta["K"]), int(meta["T"])
    joints = np.zeros((t, k, 2))
    visible = np.ones((t, k), dtype=bool)
    rows = (d / "gt.csv").read_text().splitlines()
    for line in rows[1:]:
        if not line:
            continue
        ti, ki, x, y, vis = line.split(",")
        joints[int(ti), int(ki)] = (float(x), float(y))
        visible[int(ti), int(ki)] = vis.strip() == "1"
    frames = [read_ppm(d / f"frame_{i}.ppm") for i in range(t)]
    a, b = (int(v) for v in meta["torso_pair"].split(","))
    pairs = []
    if meta.get("flip_pairs"):
        pairs = [tuple(int(v) for v in p.split("-")) for p in meta["flip_pairs"].split(";")]
    return PoseSequence(frames, joints, visible, (a, b), pairs, int(meta["seed"]))


def sequence_dirs(dataset) -> list[Path]:
    root = Path(dataset)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    dirs = sorted((p for p in root.iterdir() if p.is_dir() and p.name.startswith("seq_")), key=lambda p: p.name)
    if not dirs:
        raise FileNotFoundError(f"no seq_<n> directories under {root}")
    return dirs


def load_dataset(dataset) -> list[PoseSequence]:
    return [read_sequence(d) for d in sequence_dirs(dataset)]


def generate_dataset(
    out_dir,
    num: int,
    k: int,
    t: int,
    size: int,
    seed: int,
    occlusion: OcclusionSpec | None = None,
    motion: MotionConfig | None = None,
) -> list[PoseSequence]:
    """Write ``num`` clips under ``out_dir``; clip n uses a seed derived from (seed, n)."""
    out = Path(out_dir)
    os.makedirs(out, exist_ok=True)
    seqs = []
    for n in range(num):
        seq_seed = int(rngmod.stream(seed, f"dataset/seq/{n}").integers(0, 2 ** 63))
        seq = generate_sequence(k, t, size, size, seq_seed, motion)
        if occlusion is not None:
            seq = apply_occlusion(seq, occlusion)
        write_sequence(out / f"seq_{n:04d}", seq)
        seqs.append(seq)
    return seqs
