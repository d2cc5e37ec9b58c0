"""Learnable state: object prototypes, alpha masks, background, color net.

Prototype appearances and masks are direct pixel grids kept in [0, 1] by
projection after every optimizer step (no sigmoid reparameterization).
The optional background is a full-size color layer composited underneath
everything with implicit alpha one; it is excluded from the L1/TV
regularizers.

Checkpoint format (shared with the CLI): a JSON header (version, model
dimensions, epsilon, training step, declared tensor list) followed by raw
little-endian float32 buffers in header order. Round-trips bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import color as color_module
from .color import ColorNetWeights, init_color_net
from .errors import InvalidArgumentError

CHECKPOINT_MAGIC = b"PCDN"
CHECKPOINT_VERSION = 1


@dataclass
class Prototype:
    """One grayscale object template with its alpha mask."""

    appearance: np.ndarray  # (h, w) in [0, 1]
    alpha: np.ndarray  # (h, w) in [0, 1]
    id: int


@dataclass
class Background:
    """Full-size bottom layer (colored), composited with implicit alpha 1."""

    appearance: np.ndarray  # (H, W, C) in [0, 1]
    enabled: bool


@dataclass
class ModelState:
    prototypes: list[Prototype]
    background: Background
    color_net: ColorNetWeights
    n_max: int
    epsilon: float
    image_h: int
    image_w: int
    channels: int
    step: int = 0

    @property
    def num_prototypes(self) -> int:
        return len(self.prototypes)

    @property
    def proto_shape(self) -> tuple[int, int]:
        return self.prototypes[0].appearance.shape

    def cast(self, dtype) -> "ModelState":
        """Copy of the state with all arrays converted to ``dtype``."""
        return ModelState(
            prototypes=[
                Prototype(p.appearance.astype(dtype), p.alpha.astype(dtype), p.id)
                for p in self.prototypes
            ],
            background=Background(
                self.background.appearance.astype(dtype), self.background.enabled
            ),
            color_net=self.color_net.cast(dtype),
            n_max=self.n_max,
            epsilon=self.epsilon,
            image_h=self.image_h,
            image_w=self.image_w,
            channels=self.channels,
            step=self.step,
        )

    def copy(self) -> "ModelState":
        state = self.cast(self.prototypes[0].appearance.dtype)
        return replace(state, color_net=self.color_net.copy())


def init_model(
    p: int,
    proto_h: int,
    proto_w: int,
    image_h: int,
    image_w: int,
    channels: int,
    init_value: float = 0.2,
    train_images_mean: np.ndarray | None = None,
    n_max: int = 3,
    epsilon: float = 1e-10,
    seed: int = 0,
) -> ModelState:
    """Build a fresh model.

    Every prototype appearance and alpha mask starts at ``init_value``
    with the center pixel (h//2, w//2) at 1.0, which makes objects emerge
    centered in the prototype frame. The background is enabled only when
    a mean training image is supplied.
    """
    if p < 1 or n_max < 1:
        raise InvalidArgumentError(f"need p >= 1 and n_max >= 1, got p={p}, n_max={n_max}")
    if proto_h < 1 or proto_w < 1 or proto_h > image_h or proto_w > image_w:
        raise InvalidArgumentError(
            f"prototype {proto_h}x{proto_w} must fit image {image_h}x{image_w}"
        )
    if channels not in (1, 3):
        raise InvalidArgumentError(f"channels must be 1 or 3, got {channels}")

    prototypes = []
    for i in range(p):
        appearance = np.full((proto_h, proto_w), init_value, dtype=np.float32)
        alpha = np.full((proto_h, proto_w), init_value, dtype=np.float32)
        appearance[proto_h // 2, proto_w // 2] = 1.0
        alpha[proto_h // 2, proto_w // 2] = 1.0
        prototypes.append(Prototype(appearance=appearance, alpha=alpha, id=i))

    if train_images_mean is not None:
        mean = np.asarray(train_images_mean, dtype=np.float32)
        if mean.ndim == 2:
            mean = mean[:, :, None]
        if mean.shape != (image_h, image_w, channels):
            raise InvalidArgumentError(
                f"train_images_mean shape {mean.shape} != "
                f"{(image_h, image_w, channels)}"
            )
        background = Background(appearance=np.clip(mean, 0.0, 1.0), enabled=True)
    else:
        background = Background(
            appearance=np.zeros((image_h, image_w, channels), dtype=np.float32),
            enabled=False,
        )

    rng = np.random.default_rng(seed)
    return ModelState(
        prototypes=prototypes,
        background=background,
        color_net=init_color_net(channels, rng),
        n_max=n_max,
        epsilon=epsilon,
        image_h=image_h,
        image_w=image_w,
        channels=channels,
    )


def inject_noise(
    state: ModelState,
    probability: float,
    amplitude_low: float,
    amplitude_high: float,
    rng: np.random.Generator | int,
) -> ModelState:
    """With the given probability, perturb every prototype appearance.

    Adds i.i.d. uniform noise U[amplitude_low, amplitude_high) and clamps
    back to [0, 1]. Masks and background are untouched. One probability
    draw covers the whole call (one training batch). Deterministic for a
    fixed seed or generator state.
    """
    if not 0.0 <= probability <= 1.0:
        raise InvalidArgumentError(f"probability must be in [0, 1], got {probability}")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    if rng.uniform() < probability:
        for proto in state.prototypes:
            noise = rng.uniform(
                amplitude_low, amplitude_high, size=proto.appearance.shape
            )
            proto.appearance = np.clip(
                proto.appearance + noise.astype(proto.appearance.dtype), 0.0, 1.0
            )
    return state


def project(state: ModelState) -> ModelState:
    """Clamp all prototype, mask, and background pixels to [0, 1], in place."""
    for proto in state.prototypes:
        np.clip(proto.appearance, 0.0, 1.0, out=proto.appearance)
        np.clip(proto.alpha, 0.0, 1.0, out=proto.alpha)
    np.clip(state.background.appearance, 0.0, 1.0, out=state.background.appearance)
    return state


def _tensor_entries(state: ModelState) -> list[tuple[str, np.ndarray]]:
    entries = []
    for i, proto in enumerate(state.prototypes):
        entries.append((f"prototype/{i}/appearance", proto.appearance))
    for i, proto in enumerate(state.prototypes):
        entries.append((f"prototype/{i}/alpha", proto.alpha))
    if state.background.enabled:
        entries.append(("background", state.background.appearance))
    for name in color_module.ALL_TENSORS:
        entries.append((f"color_net/{name}", getattr(state.color_net, name)))
    return entries


def save_checkpoint(state: ModelState, path) -> None:
    """Write the state to ``path`` (JSON header + float32 LE buffers)."""
    entries = _tensor_entries(state)
    ph, pw = state.proto_shape
    header = {
        "version": CHECKPOINT_VERSION,
        "p": state.num_prototypes,
        "proto_h": ph,
        "proto_w": pw,
        "image_h": state.image_h,
        "image_w": state.image_w,
        "channels": state.channels,
        "n_max": state.n_max,
        "epsilon": state.epsilon,
        "step": state.step,
        "background_enabled": state.background.enabled,
        "tensors": [{"name": name, "shape": list(arr.shape)} for name, arr in entries],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in entries:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> ModelState:
    """Read a checkpoint written by `save_checkpoint`."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise InvalidArgumentError(f"{path}: not a model checkpoint")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header["version"] != CHECKPOINT_VERSION:
            raise InvalidArgumentError(
                f"{path}: unsupported checkpoint version {header['version']}"
            )
        tensors = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            buf = fh.read(4 * count)
            if len(buf) != 4 * count:
                raise InvalidArgumentError(f"{path}: truncated tensor {entry['name']}")
            tensors[entry["name"]] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()

    p = header["p"]
    prototypes = [
        Prototype(
            appearance=tensors[f"prototype/{i}/appearance"],
            alpha=tensors[f"prototype/{i}/alpha"],
            id=i,
        )
        for i in range(p)
    ]
    if header["background_enabled"]:
        background = Background(appearance=tensors["background"], enabled=True)
    else:
        background = Background(
            appearance=np.zeros(
                (header["image_h"], header["image_w"], header["channels"]),
                dtype=np.float32,
            ),
            enabled=False,
        )
    color_net = ColorNetWeights(
        **{name: tensors[f"color_net/{name}"] for name in color_module.ALL_TENSORS}
    )
    return ModelState(
        prototypes=prototypes,
        background=background,
        color_net=color_net,
        n_max=header["n_max"],
        epsilon=header["epsilon"],
        image_h=header["image_h"],
        image_w=header["image_w"],
        channels=header["channels"],
        step=header["step"],
    )
