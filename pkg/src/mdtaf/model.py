"""Four-stage encoder + all-MLP decoder assembly, parameter init, checkpoints.

Stages downsample by [4, 2, 2, 2] (feature strides 4/8/16/32).  Each stage is
a filtered patch embedding followed by a stack of multi-dimension transformer
blocks.  The decoder projects every stage to a shared width, resizes to
stride-4 resolution, fuses, and predicts per-pixel logits at input size.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, BlockConfig, init_mdt_block, mdt_block
from .filter_embed import PatchEmbedConfig, filtered_embed, init_patch_embed
from .layers import init_linear, linear, map_to_tokens, tokens_to_map
from .params import Initializer, ParamStore
from .tensor import ShapeError, Tensor

CHECKPOINT_MAGIC = b"MDTAF"
CHECKPOINT_VERSION = b"001"


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int = 3
    stage_channels: tuple = (64, 128, 320, 512)
    stage_depths: tuple = (2, 2, 2, 2)
    heads: tuple = (1, 2, 5, 8)
    esa_reduction: tuple = (8, 4, 2, 1)
    window: tuple = (8, 8, 8, 8)
    r1: int = 8
    r2: int = 8
    mlp_ratio: int = 4
    decoder_dim: int = 256
    num_classes: int = 1
    filtering: bool = True
    msa: bool = True
    eq17_literal: bool = False

    def embed_config(self, stage: int) -> PatchEmbedConfig:
        cin = self.input_channels if stage == 0 else self.stage_channels[stage - 1]
        cout = self.stage_channels[stage]
        if stage == 0:
            return PatchEmbedConfig.stage1(cin, cout)
        return PatchEmbedConfig.later_stage(cin, cout)

    def block_config(self, stage: int) -> BlockConfig:
        attn = AttentionConfig(channels=self.stage_channels[stage],
                               heads=self.heads[stage],
                               reduction=self.esa_reduction[stage],
                               window=self.window[stage],
                               r1=self.r1, r2=self.r2)
        return BlockConfig(attn=attn, mlp_ratio=self.mlp_ratio,
                           msa=self.msa, eq17_literal=self.eq17_literal)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        tup = {"stage_channels", "stage_depths", "heads", "esa_reduction", "window"}
        kw = {k: (tuple(v) if k in tup else v) for k, v in d.items()}
        return ModelConfig(**kw)


def default_config(**overrides) -> ModelConfig:
    return dataclasses.replace(ModelConfig(), **overrides)


def desk_config(**overrides) -> ModelConfig:
    """CPU-minutes preset: every mechanism intact, channels/depths shrunk.

    Not a published configuration; exists so training and verification run
    on a desk machine.
    """
    cfg = ModelConfig(input_channels=1,
                      stage_channels=(16, 32, 40, 64),
                      stage_depths=(1, 1, 1, 1),
                      heads=(1, 2, 5, 8),
                      esa_reduction=(4, 4, 2, 1),
                      window=(8, 4, 2, 2),
                      decoder_dim=64)
    return dataclasses.replace(cfg, **overrides)


def tiny_config(**overrides) -> ModelConfig:
    """Smallest config that exercises every code path; used for grad checks."""
    cfg = ModelConfig(input_channels=1,
                      stage_channels=(8, 16, 20, 32),
                      stage_depths=(1, 1, 1, 1),
                      heads=(1, 2, 5, 8),
                      esa_reduction=(2, 1, 1, 1),
                      window=(2, 2, 1, 1),
                      r1=4, r2=4, mlp_ratio=2,
                      decoder_dim=16)
    return dataclasses.replace(cfg, **overrides)


def init_params(cfg: ModelConfig, seed: int = 0) -> ParamStore:
    """Deterministic store: truncated normal(0, 0.02) weights, zero biases,
    zero position-bias tables, per-head temperatures at 1.0."""
    store = ParamStore()
    init = Initializer(seed)
    for i in range(4):
        prefix = f"stage{i + 1}"
        init_patch_embed(store, init, f"{prefix}.embed", cfg.embed_config(i),
                         filtering=cfg.filtering)
        bcfg = cfg.block_config(i)
        for j in range(cfg.stage_depths[i]):
            init_mdt_block(store, init, f"{prefix}.block{j + 1}", bcfg)
    for i in range(4):
        init_linear(store, init, f"decoder.proj{i + 1}", cfg.stage_channels[i], cfg.decoder_dim)
    init_linear(store, init, "decoder.fuse", 4 * cfg.decoder_dim, cfg.decoder_dim)
    init_linear(store, init, "decoder.head", cfg.decoder_dim, cfg.num_classes)
    return store


def _run_stage(x: Tensor, stage: int, cfg: ModelConfig, params: ParamStore) -> Tensor:
    prefix = f"stage{stage + 1}"
    tokens, h, w = filtered_embed(x, cfg.embed_config(stage), params,
                                  f"{prefix}.embed", filtering=cfg.filtering)
    bcfg = cfg.block_config(stage)
    win = bcfg.attn.window
    ph, pw = (-h) % win, (-w) % win
    hp, wp = h + ph, w + pw
    if ph or pw:
        # align to the window grid for the block stack, crop back after
        tokens = map_to_tokens(T.pad_bottom_right(tokens_to_map(tokens, h, w), ph, pw))
    for j in range(cfg.stage_depths[stage]):
        tokens = mdt_block(tokens, hp, wp, bcfg, params, f"{prefix}.block{j + 1}")
    fmap = tokens_to_map(tokens, hp, wp)
    if ph or pw:
        fmap = fmap[:, :, :h, :w]
    return fmap


def encoder_forward(image: Tensor, cfg: ModelConfig, params: ParamStore) -> list:
    """Features at strides 4/8/16/32 with the configured stage channels."""
    if image.shape[1] != cfg.input_channels:
        raise ShapeError(f"expected {cfg.input_channels} input channels, got {image.shape[1]}")
    features = []
    x = image
    for i in range(4):
        x = _run_stage(x, i, cfg, params)
        features.append(x)
    return features


def mlp_decoder(features: list, cfg: ModelConfig, params: ParamStore,
                out_hw: tuple | None = None) -> Tensor:
    """Fuse the four stage features into logits at ``out_hw`` resolution."""
    if len(features) != 4:
        raise ShapeError(f"decoder expects 4 stage features, got {len(features)}")
    h1, w1 = features[0].shape[2], features[0].shape[3]
    if out_hw is None:
        out_hw = (4 * h1, 4 * w1)
    resized = []
    for i, f in enumerate(features):
        t = linear(params, f"decoder.proj{i + 1}", map_to_tokens(f))
        m = tokens_to_map(t, f.shape[2], f.shape[3])
        if (f.shape[2], f.shape[3]) != (h1, w1):
            m = T.bilinear_resize(m, h1, w1)
        resized.append(m)
    fused = map_to_tokens(T.concat(resized, axis=1))
    fused = T.gelu(linear(params, "decoder.fuse", fused))
    logits = linear(params, "decoder.head", fused)
    logits = tokens_to_map(logits, h1, w1)
    if (h1, w1) != tuple(out_hw):
        logits = T.bilinear_resize(logits, out_hw[0], out_hw[1])
    return logits


def pad_to_multiple(image: Tensor, multiple: int = 32) -> Tensor:
    """Reflect-pad H and W up to the next multiple (zero-pad if tracked)."""
    h, w = image.shape[2], image.shape[3]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph == 0 and pw == 0:
        return image
    if image.requires_grad:
        return T.pad_bottom_right(image, ph, pw)
    padded = np.pad(image.data, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect")
    return Tensor(padded)


def model_forward(image: Tensor, cfg: ModelConfig, params: ParamStore) -> Tensor:
    """Full segmentation forward: logits with the input's spatial shape."""
    h, w = image.shape[2], image.shape[3]
    padded = pad_to_multiple(image)
    features = encoder_forward(padded, cfg, params)
    logits = mlp_decoder(features, cfg, params,
                         out_hw=(padded.shape[2], padded.shape[3]))
    if (logits.shape[2], logits.shape[3]) != (h, w):
        logits = logits[:, :, :h, :w]
    return logits


# ---------------------------------------------------------------------------
# checkpoint serialization

class CheckpointError(Exception):
    """Base class for checkpoint I/O failures."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def save_checkpoint(params: ParamStore, cfg: ModelConfig, path: str):
    """Binary format: magic "MDTAF001", u64-length-prefixed JSON config,
    u64 tensor count, then per tensor: u64-prefixed name, u64 rank, u64
    extents, raw little-endian f32 data."""
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC + CHECKPOINT_VERSION)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(struct.pack("<Q", len(params)))
        for name, t in params.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<Q", len(nb)))
            f.write(nb)
            f.write(struct.pack("<Q", t.ndim))
            for ext in t.shape:
                f.write(struct.pack("<Q", ext))
            f.write(t.data.astype("<f4", copy=False).tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointCorruptError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path: str, expect_cfg: ModelConfig | None = None):
    """Load (params, cfg).  With ``expect_cfg`` the stored tensors are checked
    name-by-name against that config's parameter template."""
    try:
        f = open(path, "rb")
    except FileNotFoundError as e:
        raise CheckpointError(f"checkpoint not found: {path}") from e
    with f:
        magic = _read_exact(f, 5, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointMagicError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        version = _read_exact(f, 3, "version")
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(f"unsupported checkpoint version {version!r}")
        (blob_len,) = struct.unpack("<Q", _read_exact(f, 8, "config length"))
        cfg = ModelConfig.from_dict(json.loads(_read_exact(f, blob_len, "config")))
        (count,) = struct.unpack("<Q", _read_exact(f, 8, "tensor count"))
        store = ParamStore()
        for _ in range(count):
            (nlen,) = struct.unpack("<Q", _read_exact(f, 8, "name length"))
            name = _read_exact(f, nlen, "name").decode("utf-8")
            (rank,) = struct.unpack("<Q", _read_exact(f, 8, "rank"))
            shape = tuple(struct.unpack("<Q", _read_exact(f, 8, "extent"))[0]
                          for _ in range(rank))
            n = int(np.prod(shape)) if shape else 1
            raw = _read_exact(f, 4 * n, f"data of {name}")
            store.add(name, np.frombuffer(raw, dtype="<f4").reshape(shape).copy())
        if f.read(1):
            raise CheckpointCorruptError("trailing bytes after last tensor")

    if expect_cfg is not None:
        template = init_params(expect_cfg, seed=0)
        if store.names() != template.names():
            missing = set(template.names()) ^ set(store.names())
            raise CheckpointShapeError(f"parameter names differ from config: {sorted(missing)[:5]}")
        for name, t in template.items():
            if store[name].shape != t.shape:
                raise CheckpointShapeError(
                    f"tensor {name}: checkpoint shape {store[name].shape}, "
                    f"config expects {t.shape}")
    return store, cfg
