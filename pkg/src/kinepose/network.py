"""Frame-by-frame pose network: encoder, initializer, KMM, fusion, decoder."""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .kmm import KmmParams, kmm_forward
from .numeric_core import (
    ShapeError,
    Tensor,
    concat,
    conv2d,
    read_tensor,
    relu,
    write_tensor,
)

VARIANTS = ("full", "share_qk", "no_sqrt_d", "identity_attention", "heatmap_qk")
ENCODER_WIDTH = 16


@dataclass(frozen=True)
class ModelParams:
    """All trainable tensors by name, plus the architecture variant.

    Names: ``encoder.conv1``, ``encoder.conv2``, ``initializer``,
    ``kmm.w_query``, ``kmm.w_key`` (absent when query/key are shared),
    ``fuse.g``, ``fuse.d``, ``decoder.conv1``, ``decoder.conv2``.
    """

    tensors: dict[str, Tensor]
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        self._check_chain()

    @property
    def num_joints(self) -> int:
        return self.tensors["initializer"].shape[0]

    @property
    def feature_dim(self) -> int:
        return self.tensors["encoder.conv2"].shape[0]

    @property
    def kmm(self) -> KmmParams:
        wq = self.tensors["kmm.w_query"]
        if self.variant == "share_qk":
            return KmmParams.shared(wq)
        return KmmParams(wq, self.tensors["kmm.w_key"])

    def names(self) -> list[str]:
        return list(self.tensors)

    def replace(self, tensors: dict[str, Tensor]) -> "ModelParams":
        return ModelParams({name: tensors.get(name, t) for name, t in self.tensors.items()}, self.variant)

    def with_variant(self, variant: str) -> "ModelParams":
        """Same weights evaluated under another variant (inference-time ablation)."""
        tensors = dict(self.tensors)
        if variant != "share_qk" and "kmm.w_key" not in tensors:
            tensors["kmm.w_key"] = tensors["kmm.w_query"]
        if variant == "share_qk":
            tensors.pop("kmm.w_key", None)
        return ModelParams(tensors, variant)

    def _check_chain(self):
        t = self.tensors
        required = ["encoder.conv1", "encoder.conv2", "initializer", "kmm.w_query", "fuse.g", "fuse.d",
                    "decoder.conv1", "decoder.conv2"]
        if self.variant != "share_qk":
            required.append("kmm.w_key")
        missing = [n for n in required if n not in t]
        if missing:
            raise ShapeError(f"missing parameters: {missing}")
        k, d = self.num_joints, self.feature_dim
        qk_in = k if self.variant == "heatmap_qk" else d
        if self.variant == "identity_attention":
            # KMM weights are carried but unused; accept either projection input width.
            qk_in = t["kmm.w_query"].shape[1] if t["kmm.w_query"].shape[1] in (k, d) else d
        expect = {
            "encoder.conv1": (ENCODER_WIDTH, 3, 3, 3),
            "encoder.conv2": (d, ENCODER_WIDTH, 3, 3),
            "initializer": (k, d, 1, 1),
            "kmm.w_query": (k, qk_in, 1, 1),
            "fuse.g": (d, k + d, 3, 3),
            "fuse.d": (k, d, 1, 1),
            "decoder.conv1": (d, k, 3, 3),
            "decoder.conv2": (k, d, 1, 1),
        }
        if "kmm.w_key" in t:
            expect["kmm.w_key"] = (k, qk_in, 1, 1)
        for name, shape in expect.items():
            if t[name].shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {t[name].shape}")


def init_params(num_joints: int = 5, feature_dim: int = 32, variant: str = "full", seed: int = 0) -> ModelParams:
    """He-normal initialization from the ``init`` stream of ``seed``."""
    k, d = num_joints, feature_dim
    qk_in = k if variant == "heatmap_qk" else d
    shapes = {
        "encoder.conv1": (ENCODER_WIDTH, 3, 3, 3),
        "encoder.conv2": (d, ENCODER_WIDTH, 3, 3),
        "initializer": (k, d, 1, 1),
        "kmm.w_query": (k, qk_in, 1, 1),
        "kmm.w_key": (k, qk_in, 1, 1),
        "fuse.g": (d, k + d, 3, 3),
        "fuse.d": (k, d, 1, 1),
        "decoder.conv1": (d, k, 3, 3),
        "decoder.conv2": (k, d, 1, 1),
    }
    if variant == "share_qk":
        del shapes["kmm.w_key"]
    tensors = {}
    for name, shape in shapes.items():
        g = rngmod.stream(seed, f"init/{name}")
        fan_in = shape[1] * shape[2] * shape[3]
        tensors[name] = Tensor(g.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))
    return ModelParams(tensors, variant)


@dataclass
class SequenceOutput:
    heatmaps: list[Tensor] = field(default_factory=list)
    initial_heatmaps: list[Tensor] = field(default_factory=list)
    attentions: list[Tensor] = field(default_factory=list)


def encode_frame(image: Tensor, params: ModelParams) -> Tensor:
    if len(image.shape) != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected a 3 x H x W image, got {image.shape}")
    _, hgt, wid = image.shape
    if hgt % 4 or wid % 4:
        raise ShapeError(f"image size {hgt}x{wid} is not divisible by 4")
    x = relu(conv2d(image, params.tensors["encoder.conv1"], stride=2))
    return relu(conv2d(x, params.tensors["encoder.conv2"], stride=2))


def init_pose(f_1: Tensor, params: ModelParams) -> Tensor:
    return conv2d(f_1, params.tensors["initializer"])


def fuse(m_p: Tensor, f: Tensor, params: ModelParams) -> Tensor:
    if m_p.shape[1:] != f.shape[1:]:
        raise ShapeError(f"fuse: spatial size mismatch {m_p.shape} vs {f.shape}")
    coarse = relu(conv2d(concat([m_p, f]), params.tensors["fuse.g"]))
    return conv2d(coarse, params.tensors["fuse.d"])


def decode(f_fine: Tensor, params: ModelParams) -> Tensor:
    hidden = relu(conv2d(f_fine, params.tensors["decoder.conv1"]))
    return conv2d(hidden, params.tensors["decoder.conv2"])


def _identity(k: int) -> Tensor:
    return Tensor(np.eye(k))


def forward_sequence(frames: list[Tensor], params: ModelParams) -> SequenceOutput:
    """Run the recurrence over ``frames``.

    Frame 1 goes encoder -> initializer -> decoder. Each later frame takes
    the previous final heatmaps through the KMM, fuses the result with its
    own features and decodes.
    """
    if not frames:
        raise ValueError("forward_sequence needs at least one frame")
    out = SequenceOutput()
    f_prev = encode_frame(frames[0], params)
    out.heatmaps.append(decode(init_pose(f_prev, params), params))
    for image in frames[1:]:
        f_next = encode_frame(image, params)
        m_t = out.heatmaps[-1]
        if params.variant == "identity_attention":
            m_p, attn = m_t, _identity(params.num_joints)
        elif params.variant == "heatmap_qk":
            m_p, attn = kmm_forward(m_t, init_pose(f_next, params), m_t, params.kmm)
        else:
            m_p, attn = kmm_forward(f_prev, f_next, m_t, params.kmm, use_sqrt_d=params.variant != "no_sqrt_d")
        out.initial_heatmaps.append(m_p)
        out.attentions.append(attn)
        out.heatmaps.append(decode(fuse(m_p, f_next, params), params))
        f_prev = f_next
    return out


# ---------------------------------------------------------------------------
# .kim checkpoints

_KIM_MAGIC = b"KIMN"
_KIM_VERSION = 1
_VARIANT_RECORD = "meta.variant"


def params_to_bytes(params: ModelParams) -> bytes:
    records = dict(params.tensors)
    records[_VARIANT_RECORD] = Tensor([float(VARIANTS.index(params.variant))])
    buf = io.BytesIO()
    buf.write(_KIM_MAGIC)
    buf.write(struct.pack("<II", _KIM_VERSION, len(records)))
    for name, t in records.items():
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        write_tensor(buf, t)
    return buf.getvalue()


def params_from_bytes(blob: bytes) -> ModelParams:
    fh = io.BytesIO(blob)
    if fh.read(4) != _KIM_MAGIC:
        raise ValueError("not a .kim checkpoint (bad magic)")
    version, count = struct.unpack("<II", fh.read(8))
    if version != _KIM_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", fh.read(2))
        name = fh.read(n).decode("utf-8")
        tensors[name] = read_tensor(fh)
    variant = "full"
    if _VARIANT_RECORD in tensors:
        variant = VARIANTS[int(tensors.pop(_VARIANT_RECORD).item())]
    return ModelParams(tensors, variant)


def save_params(path, params: ModelParams) -> None:
    with open(path, "wb") as fh:
        fh.write(params_to_bytes(params))


def load_params(path) -> ModelParams:
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read())
