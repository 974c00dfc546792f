"""Patch backbone, encoder stack, query-mode decoder stack and classification head."""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, fields
from typing import List, Optional

import numpy as np

from .attention import DecoderLayer, EncoderLayer, decoder_layer_forward, encoder_layer_forward
from .autodiff import DimensionError, Tensor, parameter, relu
from .errors import ConfigError
from .nn import Linear, Module

# Seed-sequence tags: each component draws from its own stream, so e.g. the
# encoder weights do not depend on how many decoder layers follow.
_STREAM_BACKBONE, _STREAM_PROJ, _STREAM_ENCODER, _STREAM_DECODER, _STREAM_QUERIES, _STREAM_HEAD = range(6)


class QueryMode(str, enum.Enum):
    PRIMAL = "primal"
    ADDITIVE_SHARED = "additive_shared"
    ADDITIVE_PER_LAYER = "additive_per_layer"

    @classmethod
    def parse(cls, value) -> "QueryMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower().replace("-", "_"))
        except ValueError:
            valid = ", ".join(m.value for m in cls)
            raise ConfigError(f"unknown query mode {value!r}; expected one of {valid}") from None


@dataclass
class ModelConfig:
    num_encoder_layers: int = 1
    num_decoder_layers: int = 2
    d_model: int = 64
    num_queries: int = 8
    num_classes: int = 12
    query_mode: QueryMode = QueryMode.PRIMAL
    residual_cross_enabled: bool = True
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    feature_channels: int = 128
    n_heads: int = 1
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.query_mode = QueryMode.parse(self.query_mode)
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.num_decoder_layers < 1:
            raise ConfigError("at least one decoder layer is required")
        if self.num_encoder_layers < 0:
            raise ConfigError("num_encoder_layers must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid * self.grid

    def to_dict(self) -> dict:
        d = asdict(self)
        d["query_mode"] = self.query_mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, h, w, ch) -> (B, h/p, w/p, p*p*ch), patches flattened row-major."""
    b, h, w, ch = images.shape
    x = images.reshape(b, h // patch, patch, w // patch, patch, ch)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, h // patch, w // patch, patch * patch * ch)


class PatchBackbone(Module):
    """Non-overlapping patches, each projected linearly to C channels, then ReLU."""

    def __init__(self, rng, config: ModelConfig, dtype):
        self.patch_size = config.patch_size
        self.image_size = config.image_size
        self.channels = config.channels
        d_patch = config.patch_size ** 2 * config.channels
        self.proj = Linear(rng, d_patch, config.feature_channels, dtype)

    def __call__(self, images) -> Tensor:
        images = np.asarray(images.data if isinstance(images, Tensor) else images)
        expected = (self.image_size, self.image_size, self.channels)
        if images.shape[-3:] != expected:
            raise DimensionError(f"backbone expects images of shape {expected}, got {images.shape}")
        patches = patchify(images.astype(self.proj.weight.dtype, copy=False), self.patch_size)
        return relu(self.proj(Tensor(patches)))


def backbone_forward(model: "Transformer", image) -> Tensor:
    """Feature map (H, W, C) for one image, or (B, H, W, C) for a batch."""
    image = np.asarray(image)
    single = image.ndim == 3
    fmap = model.backbone(image[None] if single else image)
    return fmap.reshape(fmap.shape[1:]) if single else fmap


class Transformer(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        dtype = np.dtype(config.dtype)
        D, O = config.d_model, config.num_queries

        def stream(tag):
            return np.random.default_rng([config.seed, tag])

        self.backbone = PatchBackbone(stream(_STREAM_BACKBONE), config, dtype)
        self.input_proj = Linear(stream(_STREAM_PROJ), config.feature_channels, D, dtype)
        enc_rng = stream(_STREAM_ENCODER)
        self.encoder = [EncoderLayer(enc_rng, D, config.n_heads, dtype)
                        for _ in range(config.num_encoder_layers)]
        dec_rng = stream(_STREAM_DECODER)
        self.decoder = [DecoderLayer(dec_rng, D, config.n_heads, config.residual_cross_enabled, dtype)
                        for _ in range(config.num_decoder_layers)]
        q_rng = stream(_STREAM_QUERIES)
        mode = config.query_mode
        if mode is QueryMode.ADDITIVE_PER_LAYER:
            n_query_sets = config.num_decoder_layers
        else:
            n_query_sets = 1

        self.queries = [parameter(q_rng.standard_normal((O, D)).astype(dtype))
                        for _ in range(n_query_sets)]
        self.head = Linear(stream(_STREAM_HEAD), D, config.num_classes + 1, dtype)

    def backbone_parameters(self) -> List[Tensor]:
        return self.backbone.parameters()

    def transformer_parameters(self) -> List[Tensor]:
        own = {id(p) for p in self.backbone.parameters()}
        return [p for p in self.parameters() if id(p) not in own]

    def encode(self, images) -> Tensor:
        fmap = self.backbone(images)
        b, h, w, c = fmap.shape
        x = self.input_proj(fmap.reshape(b, h * w, c))
        for layer in self.encoder:
            x = encoder_layer_forward(x, layer)
        return x

    def decode(self, memory: Tensor) -> Tensor:
        cfg = self.config
        b = memory.shape[0]
        O, D = cfg.num_queries, cfg.d_model
        if cfg.query_mode is QueryMode.PRIMAL:
            # broadcast the query matrix over the batch; gradient sums back
            tgt = self.queries[0] + Tensor(np.zeros((b, O, D), dtype=memory.dtype))
        else:
            tgt = Tensor(np.zeros((b, O, D), dtype=memory.dtype))
        for i, layer in enumerate(self.decoder):
            q_bias = self._query_bias(i)
            tgt = decoder_layer_forward(tgt, memory, layer, q_bias)
        return tgt

    def _query_bias(self, layer_index: int) -> Optional[Tensor]:
        mode = self.config.query_mode
        if mode is QueryMode.PRIMAL:
            return None
        if mode is QueryMode.ADDITIVE_SHARED:
            return self.queries[0]
        return self.queries[layer_index]

    def __call__(self, images) -> Tensor:
        """Logits of shape (B, O, c+1); a single (h, w, ch) image gives (O, c+1)."""
        images = np.asarray(images.data if isinstance(images, Tensor) else images)
        single = images.ndim == 3
        out = self.head(self.decode(self.encode(images[None] if single else images)))
        return out.reshape(out.shape[1:]) if single else out

    def state_dict(self) -> dict:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise DimensionError(f"state is missing tensors: {sorted(missing)}")
        unexpected = set(state) - set(own)
        if unexpected:
            raise DimensionError(f"state has unexpected tensors: {sorted(unexpected)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise DimensionError(
                    f"shape mismatch for tensor {name!r}: checkpoint {arr.shape}, model {p.shape}"
                )
        for name, p in own.items():
            p.data[...] = state[name]


def model_forward(model: Transformer, images) -> Tensor:
    return model(images)
