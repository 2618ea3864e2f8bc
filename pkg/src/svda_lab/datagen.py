"""Synthetic occluded-shape depth scenes and the raw tensor file format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"TNSR"
TENSOR_VERSION = 1

BACKGROUND_DEPTH = 1.0


class SceneError(ValueError):
    """Invalid scene request or scene contents."""


class TensorFormatError(SceneError):
    """Malformed raw tensor file."""


class ShapeMismatchError(SceneError):
    pass


class NonPositiveDepthError(SceneError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    count: int = 256
    val_count: int = 64
    height: int = 64
    width: int = 64
    min_shapes: int = 1
    max_shapes: int = 4
    min_depth: float = 0.2
    max_depth: float = 0.9
    noise_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise SceneError("count must be at least 1")
        if self.val_count < 0:
            raise SceneError("val_count must be non-negative")
        if self.noise_std < 0:
            raise SceneError("noise_std must be non-negative")
        if not 0 <= self.min_shapes <= self.max_shapes:
            raise SceneError("need 0 <= min_shapes <= max_shapes")
        if not 0 < self.min_depth <= self.max_depth <= BACKGROUND_DEPTH:
            raise SceneError("need 0 < min_depth <= max_depth <= 1")


@dataclass
class Scene:
    image: np.ndarray  # [1, H, W], intensities in [0, 1]
    depth: np.ndarray  # [H, W], in (0, 1]
    seed: int = 0

    def __post_init__(self):
        validate_pair(self.image, self.depth)


@dataclass(frozen=True)
class Shape:
    kind: str  # "rect" or "disc"
    depth: float
    # rect: (top, left, bottom, right), half-open; disc: (center_y, center_x, radius)
    geometry: tuple[float, ...]

    def mask(self, h: int, w: int) -> np.ndarray:
        if self.kind == "rect":
            top, left, bottom, right = (int(v) for v in self.geometry)
            m = np.zeros((h, w), dtype=bool)
            m[top:bottom, left:right] = True
            return m
        cy, cx, r = self.geometry
        yy, xx = np.mgrid[0:h, 0:w]
        return (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= r * r


def intensity(depth):
    """Nearer is brighter: ``1 - 0.8 * depth``."""
    return 1.0 - 0.8 * np.asarray(depth, dtype=np.float64)


def scene_seed(base_seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([base_seed, index])


def sample_shapes(rng: np.random.Generator, spec: DatasetSpec) -> list[Shape]:
    h, w = spec.height, spec.width
    k = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    depths = rng.uniform(spec.min_depth, spec.max_depth, size=k)
    shapes = []
    for d in depths:
        if rng.random() < 0.5:
            sh = int(rng.integers(max(1, h // 8), max(2, h // 2) + 1))
            sw = int(rng.integers(max(1, w // 8), max(2, w // 2) + 1))
            top = int(rng.integers(0, h - min(sh, h) + 1))
            left = int(rng.integers(0, w - min(sw, w) + 1))
            shapes.append(Shape("rect", float(d), (top, left, min(top + sh, h), min(left + sw, w))))
        else:
            r = float(rng.uniform(max(1.0, min(h, w) / 10), max(1.5, min(h, w) / 4)))
            cy, cx = float(rng.uniform(0, h)), float(rng.uniform(0, w))
            shapes.append(Shape("disc", float(d), (cy, cx, r)))
    return shapes


def render(shapes: list[Shape], h: int, w: int, noise_std: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Painter's algorithm: draw far to near so nearer shapes overwrite."""
    depth = np.full((h, w), BACKGROUND_DEPTH)
    for s in sorted(shapes, key=lambda s: -s.depth):
        depth[s.mask(h, w)] = s.depth
    img = intensity(depth)
    if noise_std > 0:
        img = img + rng.normal(0.0, noise_std, size=(h, w))
    return np.clip(img, 0.0, 1.0)[None], depth


def generate_scene(spec: DatasetSpec, index: int) -> Scene:
    """Scene ``index`` of the dataset; a pure function of ``(spec, index)``."""
    if spec.height < 1 or spec.width < 1:
        raise SceneError(f"zero-area image {spec.height}x{spec.width}")
    ss = scene_seed(spec.seed, index)
    rng = np.random.default_rng(ss)
    shapes = sample_shapes(rng, spec)
    image, depth = render(shapes, spec.height, spec.width, spec.noise_std, rng)
    return Scene(image, depth, int(ss.generate_state(1)[0]))


def generate_split(spec: DatasetSpec, split: str = "train") -> list[Scene]:
    """Train scenes use indices ``[0, count)``, validation ``[count, count + val_count)``."""
    if split == "train":
        idx = range(spec.count)
    elif split == "val":
        idx = range(spec.count, spec.count + spec.val_count)
    else:
        raise ValueError(f"unknown split {split!r}")
    return [generate_scene(spec, i) for i in idx]


# -- raw tensor files --------------------------------------------------
def save_tensor(path, arr) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    if arr.ndim > 255:
        raise TensorFormatError("rank exceeds 255")
    header = TENSOR_MAGIC + struct.pack("<IB", TENSOR_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 9 or buf[:4] != TENSOR_MAGIC:
        raise TensorFormatError(f"{path}: missing TNSR header")
    version, rank = struct.unpack_from("<IB", buf, 4)
    if version != TENSOR_VERSION:
        raise TensorFormatError(f"{path}: unsupported version {version}")
    pos = 9
    if len(buf) < pos + 8 * rank:
        raise TensorFormatError(f"{path}: truncated extents")
    shape = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    numel = int(np.prod(shape)) if rank else 1
    if len(buf) != pos + 8 * numel:
        raise TensorFormatError(
            f"{path}: expected {numel} values for shape {shape}, file holds {(len(buf) - pos) / 8:g}"
        )
    return np.frombuffer(buf, dtype="<f8", offset=pos).astype(np.float64).reshape(shape)


def validate_pair(image: np.ndarray, depth: np.ndarray) -> None:
    if image.ndim != 3 or depth.ndim != 2 or image.shape[1:] != depth.shape:
        raise ShapeMismatchError(f"image shape {image.shape} does not match depth shape {depth.shape}")
    if not (depth > 0).all():
        raise NonPositiveDepthError("depth map contains non-positive values")


def save_pair(image_path, depth_path, scene: Scene) -> None:
    save_tensor(image_path, scene.image)
    save_tensor(depth_path, scene.depth)


def load_pair(image_path, depth_path) -> Scene:
    image = load_tensor(image_path)
    depth = load_tensor(depth_path)
    if image.ndim == 2:
        image = image[None]
    return Scene(image, depth)


def write_manifest(path, pairs: list[tuple[str, str]]) -> None:
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        for img, dep in pairs:
            fh.write(f"{img}\t{dep}\n")


def read_manifest(path) -> list[tuple[Path, Path]]:
    """Image/depth path pairs; relative paths resolve against the manifest directory."""
    path = Path(path)
    base = path.parent
    pairs = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise SceneError(f"{path}:{lineno}: expected two tab-separated paths")
        pairs.append(tuple(base / p if not Path(p).is_absolute() else Path(p) for p in parts))
    return pairs


def load_manifest(path) -> list[Scene]:
    return [load_pair(img, dep) for img, dep in read_manifest(path)]
