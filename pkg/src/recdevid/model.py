"""Declarative model topology: the full ConvLSTM -> BiLSTM -> encoder stack
and its block-subset ablations."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import (BatchNorm, BiLSTM, ConvLSTM1D, Dense, EncoderBlock, Module,
                     sinusoidal_positions)
from .tensor import ShapeError, Tensor

TOKEN_SCHEMES = ("block-tokens", "scalar-tokens")

# (ConvLSTM, BiLSTM, Transformer)
GROUPS = {
    1: (True, False, False),
    2: (False, True, False),
    3: (False, False, True),
    4: (True, True, True),
    5: (False, True, True),
    6: (True, False, True),
    7: (True, True, False),
}


class ConfigError(ValueError):
    """Invalid model/training configuration."""


@dataclass
class ModelConfig:
    use_convlstm: bool = True
    use_bilstm: bool = True
    use_transformer: bool = True
    convlstm_specs: list = field(default_factory=lambda: [[64, 3, 3], [32, 3, 2]])
    bilstm_units: int = 128
    encoder_num: int = 2
    heads: int = 8
    head_dim: int = 64
    ff_units: int = 128
    mlp_units: int = 128
    n_classes: int = 45
    token_scheme: str = "block-tokens"
    block_size: int = 16
    frames: int = 128
    dims: int = 73
    bn_momentum: float = 0.9

    def validate(self) -> "ModelConfig":
        if not (self.use_convlstm or self.use_bilstm or self.use_transformer):
            raise ConfigError("at least one of ConvLSTM, BiLSTM, Transformer must be enabled")
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.token_scheme not in TOKEN_SCHEMES:
            raise ConfigError(f"token_scheme must be one of {TOKEN_SCHEMES}, got {self.token_scheme!r}")
        if self.use_convlstm and not self.convlstm_specs:
            raise ConfigError("ConvLSTM enabled but no layer specs given")
        for spec in self.convlstm_specs:
            if len(spec) != 3 or min(spec) < 1:
                raise ConfigError(f"ConvLSTM spec must be [filters, kernel, stride], got {spec}")
        if self.use_bilstm and self.use_transformer and self.token_scheme == "block-tokens":
            if (2 * self.bilstm_units) % self.block_size:
                raise ConfigError(f"BiLSTM width {2 * self.bilstm_units} not divisible by block_size {self.block_size}")
        for name in ("bilstm_units", "encoder_num", "heads", "head_dim", "ff_units", "mlp_units", "frames", "dims"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d).validate()


def ablation_config(group: int, **overrides) -> ModelConfig:
    """Block flags for ablation group 1..7 (4 is the full model)."""
    if group not in GROUPS:
        raise ConfigError(f"ablation group must be in 1..7, got {group}")
    c, b, t = GROUPS[group]
    return ModelConfig(use_convlstm=c, use_bilstm=b, use_transformer=t, **overrides).validate()


class DeviceIdModel(Module):
    """Instantiated topology.  ``forward`` maps (B, frames, dims) features to
    (B, n_classes) logits; an unbatched (frames, dims) input gives (n_classes,)."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config.validate()
        self.seed = seed
        rng = np.random.default_rng(seed)
        cfg = config
        length, channels = cfg.dims, 1
        width = cfg.dims  # per-frame width fed to the next block
        self.conv_names: list[tuple[str, str]] = []
        if cfg.use_convlstm:
            for i, (filters, kernel, stride) in enumerate(cfg.convlstm_specs, start=1):
                conv = self.add_module(f"conv{i}", ConvLSTM1D(length, channels, filters, kernel, stride, rng))
                self.add_module(f"bn{i}", BatchNorm(filters, momentum=cfg.bn_momentum))
                self.conv_names.append((f"conv{i}", f"bn{i}"))
                length, channels = conv.out_len, filters
            width = length * channels
        self.frame_width = width
        if cfg.use_bilstm:
            self.add_module("bilstm", BiLSTM(width, cfg.bilstm_units, rng))
            width = 2 * cfg.bilstm_units
        if cfg.use_transformer:
            if cfg.use_bilstm:
                if cfg.token_scheme == "scalar-tokens":
                    self.tokens, self.d_model = width, 1
                else:
                    self.tokens, self.d_model = width // cfg.block_size, cfg.block_size
            else:
                self.tokens, self.d_model = cfg.frames, width
            self.positions = sinusoidal_positions(self.tokens, self.d_model, np.float64)
            for k in range(cfg.encoder_num):
                self.add_module(f"enc{k}", EncoderBlock(self.d_model, cfg.heads, cfg.head_dim, cfg.ff_units, rng))
            width = self.d_model
        self.body_width = width
        self.add_module("mlp", Dense(width, cfg.mlp_units, "relu", rng))
        self.add_module("out", Dense(cfg.mlp_units, cfg.n_classes, None, rng))

    # -- pipeline ------------------------------------------------------------
    def body(self, x, trace: list | None = None) -> Tensor:
        """Everything before the MLP head: (B, frames, dims) -> (B, body_width)."""
        cfg = self.config
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=T.get_default_dtype()))
        if x.ndim != 3 or x.shape[1:] != (cfg.frames, cfg.dims):
            raise ShapeError(f"model expects (B, {cfg.frames}, {cfg.dims}) features, got {x.shape}")
        batch = x.shape[0]
        note = (lambda name, t: trace.append((name, t.shape))) if trace is not None else (lambda *a: None)
        note("input", x)
        seq = T.transpose(x, (1, 0, 2))  # time-major (T, B, D)
        if cfg.use_convlstm:
            h = T.reshape(seq, (cfg.frames, batch, cfg.dims, 1))
            for conv_name, bn_name in self.conv_names:
                h = self._modules[bn_name](self._modules[conv_name](h))
                note(conv_name, T.transpose(h, (1, 0, 2, 3)))
            seq = T.reshape(h, (cfg.frames, batch, self.frame_width))
            note("reshape", T.transpose(seq, (1, 0, 2)))
        if cfg.use_bilstm:
            vec = self.bilstm(seq)
            note("bilstm", vec)
            if not cfg.use_transformer:
                return vec
            tokens = T.reshape(vec, (batch, self.tokens, self.d_model))
        elif cfg.use_transformer:
            tokens = T.transpose(seq, (1, 0, 2))
        else:
            # ConvLSTM alone: its last hidden state summarises the sequence
            vec = seq[cfg.frames - 1]
            note("last_step", vec)
            return vec
        pos = Tensor(np.broadcast_to(self.positions.astype(tokens.dtype), tokens.shape).copy())
        tokens = tokens + pos
        note("tokens", tokens)
        for k in range(cfg.encoder_num):
            tokens = self._modules[f"enc{k}"](tokens)
        pooled = T.mean(tokens, axis=1)
        note("pooled", pooled)
        return pooled

    def head(self, feats: Tensor, trace: list | None = None) -> Tensor:
        hidden = self.mlp(feats)
        logits = self.out(hidden)
        if trace is not None:
            trace.append(("mlp", hidden.shape))
            trace.append(("logits", logits.shape))
        return logits

    def forward(self, x, trace: list | None = None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=T.get_default_dtype()))
        if x.ndim == 2:
            out = self.forward(T.reshape(x, (1,) + x.shape), trace)
            return T.reshape(out, (self.config.n_classes,))
        return self.head(self.body(x, trace), trace)

    def replace_head(self, n_classes: int, seed: int) -> None:
        """Fresh output layer for a new class count (transfer learning)."""
        self.config = dataclasses.replace(self.config, n_classes=n_classes).validate()
        self.add_module("out", Dense(self.config.mlp_units, n_classes, None, np.random.default_rng(seed)))

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))


def build(config: ModelConfig, seed: int = 0) -> DeviceIdModel:
    return DeviceIdModel(config, seed)


def forward(model: DeviceIdModel, feature) -> np.ndarray:
    """Inference logits for one (frames, dims) feature or a batch."""
    prev = model.training
    model.eval()
    try:
        with T.no_grad():
            return model(feature).data
    finally:
        model.train(prev)


def shape_trace(model: DeviceIdModel, feature) -> list[tuple[str, tuple]]:
    """Per-stage shapes for one unbatched feature (batch axis dropped)."""
    trace: list = []
    prev = model.training
    model.eval()
    try:
        with T.no_grad():
            model(np.asarray(feature)[None], trace)
    finally:
        model.train(prev)
    return [(name, tuple(shape[1:])) for name, shape in trace]
