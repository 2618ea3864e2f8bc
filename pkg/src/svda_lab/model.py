"""Miniature ViT-style dense depth regressor with swappable attention."""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .attention import AttentionConfig, AttentionRecord, HeadParams, Mechanism, multi_head_forward
from .numerics import Tensor


class ConfigError(ValueError):
    """Invalid model, data, or training configuration."""


@dataclass(frozen=True)
class ModelConfig:
    image_h: int = 64
    image_w: int = 64
    channels: int = 1
    patch_size: int = 8
    d_model: int = 64
    num_layers: int = 4
    num_heads: int = 4
    d_k: int = 16
    mechanism: Mechanism = Mechanism.SVDA
    mlp_hidden: int = 256
    head: str = "nearest_upsample_linear"
    ln_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "mechanism", Mechanism(self.mechanism))
        for name in ("image_h", "image_w", "channels", "patch_size", "mlp_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.num_layers < 0:
            raise ConfigError("num_layers must be non-negative")
        if self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise ConfigError(
                f"patch_size {self.patch_size} must divide image size {self.image_h}x{self.image_w}"
            )
        if self.head != "nearest_upsample_linear":
            raise ConfigError(f"unknown head {self.head!r}")
        if self.ln_eps < 0:
            raise ConfigError("ln_eps must be non-negative")
        try:
            self.attention
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.d_model, self.num_heads, self.d_k, self.mechanism)

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_h // self.patch_size, self.image_w // self.patch_size

    @property
    def num_tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def with_mechanism(self, mechanism) -> ModelConfig:
        return ModelConfig(**{**asdict(self), "mechanism": Mechanism(mechanism)})


def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init) in the fixed order that drives the RNG stream."""
    d, pd = cfg.d_model, cfg.patch_dim
    specs = [
        ("patch_embed.weight", (pd, d), "uniform"),
        ("patch_embed.bias", (d,), "zeros"),
        ("pos_embed", (cfg.num_tokens, d), "uniform"),
    ]
    for layer in range(cfg.num_layers):
        pre = f"layers.{layer}"
        specs += [(f"{pre}.ln1.gamma", (d,), "ones"), (f"{pre}.ln1.beta", (d,), "zeros")]
        for h in range(cfg.num_heads):
            hp = f"{pre}.attn.heads.{h}"
            specs += [(f"{hp}.{w}", (d, cfg.d_k), "uniform") for w in ("w_q", "w_k", "w_v")]
            if cfg.mechanism is Mechanism.SVDA:
                specs.append((f"{hp}.sigma", (cfg.d_k,), "ones"))
        specs += [
            (f"{pre}.attn.w_o", (d, d), "uniform"),
            (f"{pre}.ln2.gamma", (d,), "ones"),
            (f"{pre}.ln2.beta", (d,), "zeros"),
            (f"{pre}.mlp.w1", (d, cfg.mlp_hidden), "uniform"),
            (f"{pre}.mlp.b1", (cfg.mlp_hidden,), "zeros"),
            (f"{pre}.mlp.w2", (cfg.mlp_hidden, d), "uniform"),
            (f"{pre}.mlp.b2", (d,), "zeros"),
        ]
    specs += [
        ("norm.gamma", (d,), "ones"),
        ("norm.beta", (d,), "zeros"),
        ("head.weight", (d, cfg.patch_size * cfg.patch_size), "uniform"),
        ("head.bias", (cfg.patch_size * cfg.patch_size,), "zeros"),
    ]
    return specs


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights; sigma starts at ones.

    Only "uniform" entries consume random numbers, so an SVDA model and a
    baseline model built from the same seed share every common weight.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, kind in _param_shapes(cfg):
        if kind == "uniform":
            bound = 1.0 / math.sqrt(shape[0] if name != "pos_embed" else shape[1])
            data = rng.uniform(-bound, bound, size=shape)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


def image_to_patches(images: np.ndarray, patch: int) -> np.ndarray:
    """``[B, C, H, W]`` -> ``[B, n, P*P*C]`` in row-major patch order.

    Each patch vector is laid out channel-major, then row, then column.
    """
    images = np.asarray(images, dtype=np.float64)
    b, c, h, w = images.shape
    if h % patch or w % patch:
        raise nx.ShapeError(f"image size {h}x{w} is not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    x = images.reshape(b, c, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, gh * gw, c * patch * patch)


def patch_embed(images, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Linear patch projection plus learnable positional embedding.

    Accepts a single ``[C, H, W]`` image (returns ``[n, d]``) or a batch.
    """
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    if images.shape[1:] != (cfg.channels, cfg.image_h, cfg.image_w):
        if images.shape[2] % cfg.patch_size or images.shape[3] % cfg.patch_size:
            raise nx.ShapeError(
                f"image size {images.shape[2]}x{images.shape[3]} is not divisible "
                f"by patch size {cfg.patch_size}"
            )
        raise nx.ShapeError(
            f"expected images of shape {(cfg.channels, cfg.image_h, cfg.image_w)}, got {images.shape[1:]}"
        )
    patches = Tensor(image_to_patches(images, cfg.patch_size))
    tokens = patches @ params["patch_embed.weight"] + params["patch_embed.bias"]
    tokens = tokens + params["pos_embed"]
    return tokens.reshape(tokens.shape[1:]) if single else tokens


def head_params(params: dict[str, Tensor], layer: int, head: int) -> HeadParams:
    pre = f"layers.{layer}.attn.heads.{head}"
    return HeadParams(
        params[f"{pre}.w_q"], params[f"{pre}.w_k"], params[f"{pre}.w_v"], params.get(f"{pre}.sigma")
    )


def encoder_forward(
    tokens: Tensor, params: dict[str, Tensor], cfg: ModelConfig, capture: bool = False
) -> tuple[Tensor, list[AttentionRecord]]:
    """Pre-norm residual blocks: ``x + attn(ln(x))`` then ``x + mlp(ln(x))``."""
    x = tokens
    recs: list[AttentionRecord] = []
    for layer in range(cfg.num_layers):
        pre = f"layers.{layer}"
        h = nx.layer_norm(x, params[f"{pre}.ln1.gamma"], params[f"{pre}.ln1.beta"], cfg.ln_eps)
        heads = [head_params(params, layer, i) for i in range(cfg.num_heads)]
        a, r = multi_head_forward(
            h, heads, params[f"{pre}.attn.w_o"], cfg.mechanism, capture=capture, layer_index=layer
        )
        recs.extend(r)
        x = x + a
        h = nx.layer_norm(x, params[f"{pre}.ln2.gamma"], params[f"{pre}.ln2.beta"], cfg.ln_eps)
        h = nx.gelu(h @ params[f"{pre}.mlp.w1"] + params[f"{pre}.mlp.b1"])
        x = x + (h @ params[f"{pre}.mlp.w2"] + params[f"{pre}.mlp.b2"])
    return x, recs


def depth_head(tokens: Tensor, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Per-token linear map to a P x P block, tiled into the image grid, then sigmoid."""
    single = tokens.ndim == 2
    if single:
        tokens = tokens.reshape(1, *tokens.shape)
    b = tokens.shape[0]
    gh, gw = cfg.grid
    p = cfg.patch_size
    h = nx.layer_norm(tokens, params["norm.gamma"], params["norm.beta"], cfg.ln_eps)
    blocks = h @ params["head.weight"] + params["head.bias"]  # [B, n, P*P]
    grid = blocks.reshape(b, gh, gw, p, p).transpose(0, 1, 3, 2, 4).reshape(b, gh * p, gw * p)
    out = nx.sigmoid(grid)
    return out.reshape(out.shape[1:]) if single else out


class DepthViT:
    """Parameters plus forward pass for the toy dense regressor."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)

    def forward(self, images, capture: bool = False) -> tuple[Tensor, list[AttentionRecord]]:
        """``[B, C, H, W]`` images -> ``[B, H, W]`` depth in (0, 1), plus records."""
        tokens = patch_embed(images, self.params, self.cfg)
        tokens, recs = encoder_forward(tokens, self.params, self.cfg, capture)
        return depth_head(tokens, self.params, self.cfg), recs

    __call__ = forward

    def predict(self, images) -> np.ndarray:
        with nx.no_grad():
            return self.forward(images)[0].data

    def embed(self, images) -> np.ndarray:
        with nx.no_grad():
            return patch_embed(images, self.params, self.cfg).data

    def attention_maps(self, tokens) -> np.ndarray:
        """Stacked attention ``[L, H, B, n, n]`` for pre-embedded tokens ``[B, n, d]``."""
        tokens = np.asarray(tokens, dtype=np.float64)
        with nx.no_grad():
            _, recs = encoder_forward(Tensor(tokens), self.params, self.cfg, capture=True)
        cfg = self.cfg
        n = tokens.shape[-2]
        out = np.empty((cfg.num_layers, cfg.num_heads, tokens.shape[0], n, n))
        for r in recs:
            out[r.layer_index, r.head_index, r.sample_index] = r.attention
        return out

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=np.float64).reshape(self.params[k].shape)


# -- checkpoint container ----------------------------------------------
CHECKPOINT_MAGIC = b"SVDA"
CHECKPOINT_VERSION = 1
CONFIG_SECTION = "meta.config"
_MECH_CODES = {Mechanism.SVDA: 0.0, Mechanism.BASELINE: 1.0}
_CONFIG_FIELDS = (
    "image_h", "image_w", "channels", "patch_size", "d_model", "num_layers",
    "num_heads", "d_k", "mlp_hidden",
)  # fmt: skip


class CheckpointError(ValueError):
    """Malformed or inconsistent checkpoint file."""


def _config_vector(cfg: ModelConfig) -> np.ndarray:
    vals = [float(getattr(cfg, f)) for f in _CONFIG_FIELDS]
    vals += [_MECH_CODES[cfg.mechanism], cfg.ln_eps]
    return np.array(vals, dtype=np.float64)


def _config_from_vector(vec: np.ndarray) -> ModelConfig:
    if vec.size != len(_CONFIG_FIELDS) + 2:
        raise CheckpointError("config section has the wrong length")
    kwargs = {f: int(v) for f, v in zip(_CONFIG_FIELDS, vec)}
    mech = {v: k for k, v in _MECH_CODES.items()}.get(float(vec[-2]))
    if mech is None:
        raise CheckpointError(f"unknown mechanism code {vec[-2]}")
    return ModelConfig(**kwargs, mechanism=mech, ln_eps=float(vec[-1]))


def save_checkpoint(path, model: DepthViT) -> None:
    """Write the header then one named float64 section per parameter.

    The first section, ``meta.config``, encodes the architecture so the file
    is self-describing; the header count includes it.
    """
    sections = [(CONFIG_SECTION, _config_vector(model.cfg))]
    sections += [(k, v.data) for k, v in model.params.items()]
    chunks = [CHECKPOINT_MAGIC, struct.pack("<IQ", CHECKPOINT_VERSION, len(sections))]
    for name, arr in sections:
        raw = name.encode("utf-8")
        flat = np.ascontiguousarray(arr, dtype="<f8").reshape(-1)
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<Q", flat.size))
        chunks.append(flat.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> DepthViT:
    buf = Path(path).read_bytes()
    if len(buf) < 16 or buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not an SVDA checkpoint")
    version, count = struct.unpack_from("<IQ", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 16
    sections: dict[str, np.ndarray] = {}
    for _ in range(count):
        try:
            (nlen,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2 : pos + 2 + nlen].decode("utf-8")
            pos += 2 + nlen
            (numel,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
        except (struct.error, UnicodeDecodeError):
            raise CheckpointError(f"{path}: truncated section header") from None
        end = pos + 8 * numel
        if end > len(buf):
            raise CheckpointError(f"{path}: truncated data in section {name!r}")
        sections[name] = np.frombuffer(buf, dtype="<f8", count=numel, offset=pos).astype(np.float64)
        pos = end
    if pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes after last section")
    if CONFIG_SECTION not in sections:
        raise CheckpointError(f"{path}: missing {CONFIG_SECTION} section")
    cfg = _config_from_vector(sections.pop(CONFIG_SECTION))
    model = DepthViT(cfg, seed=0)
    if set(sections) != set(model.params):
        missing = sorted(set(model.params) - set(sections))
        extra = sorted(set(sections) - set(model.params))
        raise CheckpointError(f"{path}: parameter mismatch (missing={missing}, extra={extra})")
    for name, arr in sections.items():
        if arr.size != model.params[name].size:
            raise CheckpointError(f"{path}: section {name!r} has {arr.size} values")
    model.load_state(sections)
    return model
