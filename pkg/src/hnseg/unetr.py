"""UNETR: ViT encoder over 3D patches, convolutional decoder fed by encoder skip taps."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeMismatch


@dataclass
class UnetrConfig:
    img_size: int = 144
    patch_size: int = 16
    embed_dim: int = 768
    num_layers: int = 12
    num_heads: int = 12
    mlp_dim: int = 3072
    in_channels: int = 2
    out_channels: int = 1
    base_features: int = 16
    skip_layers: tuple = ()
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.skip_layers:
            q = self.num_layers // 4
            self.skip_layers = (q, 2 * q, 3 * q, self.num_layers)
        self.skip_layers = tuple(int(s) for s in self.skip_layers)
        self.validate()

    def validate(self) -> None:
        if self.img_size % self.patch_size:
            raise ConfigError(f"img_size {self.img_size} not divisible by patch_size {self.patch_size}")
        if self.patch_size < 8 or self.patch_size & (self.patch_size - 1):
            raise ConfigError(f"patch_size {self.patch_size} must be a power of two >= 8 "
                              "(the decoder restores it with x2 stages and needs three skip levels)")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.num_layers < 4 or self.num_layers % 4:
            raise ConfigError(f"num_layers {self.num_layers} must be a positive multiple of 4")
        if len(self.skip_layers) != 4 or list(self.skip_layers) != sorted(self.skip_layers) \
                or self.skip_layers[-1] != self.num_layers or self.skip_layers[0] < 1:
            raise ConfigError(f"skip_layers {self.skip_layers} must be 4 sorted layers ending at {self.num_layers}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout {self.dropout} outside [0, 1)")
        for name in ("in_channels", "out_channels", "base_features", "mlp_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def grid(self) -> int:
        return self.img_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid ** 3

    def to_dict(self) -> dict:
        d = asdict(self)
        d["skip_layers"] = list(self.skip_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UnetrConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: (tuple(v) if k == "skip_layers" else v) for k, v in d.items() if k in names})


# skip taps, deepest first: (name, index into skip_layers, deconv-conv stages)
_SKIP_PLAN = (("enc4", 2, 1), ("enc3", 1, 2), ("enc2", 0, 3))


def up_levels(cfg: "UnetrConfig") -> int:
    """Number of x2 decoder stages from the token grid back to full resolution."""
    return int(round(np.log2(cfg.patch_size)))


def level_width(cfg: "UnetrConfig", level: int) -> int:
    """Channels at decoder level ``level`` (1 = 2G, ..., up_levels = full resolution)."""
    return cfg.base_features * 2 ** (up_levels(cfg) - level)


def skips_at(cfg: "UnetrConfig", level: int) -> list:
    """Skip sources concatenated at a decoder level, in concatenation order."""
    n = up_levels(cfg)
    names = [name for name, _, stages in _SKIP_PLAN if stages == level]
    if level == n:
        names.append("enc1")
    return names


def param_shapes(cfg: UnetrConfig) -> dict:
    """Ordered parameter name -> shape for a configuration."""
    E, M, F, C, p = cfg.embed_dim, cfg.mlp_dim, cfg.base_features, cfg.in_channels, cfg.patch_size
    n = up_levels(cfg)
    s = {
        "patch.w": (C * p ** 3, E),
        "patch.b": (E,),
        "pos_embed": (cfg.num_tokens, E),
    }
    for i in range(cfg.num_layers):
        pre = f"layers.{i}."
        s.update({
            pre + "ln1.g": (E,), pre + "ln1.b": (E,),
            pre + "attn.qkv.w": (E, 3 * E), pre + "attn.qkv.b": (3 * E,),
            pre + "attn.out.w": (E, E), pre + "attn.out.b": (E,),
            pre + "ln2.g": (E,), pre + "ln2.b": (E,),
            pre + "mlp.fc1.w": (E, M), pre + "mlp.fc1.b": (M,),
            pre + "mlp.fc2.w": (M, E), pre + "mlp.fc2.b": (E,),
        })
    s.update({"enc1.conv.w": (F, C, 3, 3, 3), "enc1.norm.g": (F,), "enc1.norm.b": (F,)})
    for name, _, stages in _SKIP_PLAN:
        width, cin = level_width(cfg, stages), E
        for k in range(stages):
            s.update({
                f"{name}.up{k}.w": (width, cin, 2, 2, 2), f"{name}.up{k}.b": (width,),
                f"{name}.conv{k}.w": (width, width, 3, 3, 3),
                f"{name}.norm{k}.g": (width,), f"{name}.norm{k}.b": (width,),
            })
            cin = width
    cin = E
    for level in range(1, n + 1):
        name, width = f"dec{level}", level_width(cfg, level)
        concat = width * (1 + len(skips_at(cfg, level)))
        s.update({
            f"{name}.up.w": (width, cin, 2, 2, 2), f"{name}.up.b": (width,),
            f"{name}.conv_a.w": (width, concat, 3, 3, 3),
            f"{name}.norm_a.g": (width,), f"{name}.norm_a.b": (width,),
            f"{name}.conv_b.w": (width, width, 3, 3, 3),
            f"{name}.norm_b.g": (width,), f"{name}.norm_b.b": (width,),
        })
        cin = width
    s.update({"head.w": (cfg.out_channels, F, 1, 1, 1), "head.b": (cfg.out_channels,)})
    return s


def param_count(cfg: UnetrConfig) -> int:
    return int(sum(np.prod(shape) for shape in param_shapes(cfg).values()))


def is_no_decay(name: str) -> bool:
    """Norm gains/biases and position embeddings are excluded from weight decay."""
    parts = name.split(".")
    return name == "pos_embed" or any(p.startswith(("ln", "norm")) for p in parts)


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(cfg: UnetrConfig, seed: Optional[int] = None, dtype=np.float32) -> dict:
    """Truncated-normal(0.02) transformer weights, fan-in uniform kernels, zero biases and positions."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "pos_embed" or leaf == "b":
            arr = np.zeros(shape)
        elif leaf == "g":
            arr = np.ones(shape)
        elif len(shape) == 5:
            fan_in = int(np.prod(shape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        else:
            arr = _trunc_normal(rng, shape, 0.02)
        params[name] = arr.astype(dtype)
    return params


def as_tensors(params: dict, requires_grad: bool = False, dtype=None) -> dict:
    return {k: Tensor(v if dtype is None else v.astype(dtype), requires_grad=requires_grad)
            for k, v in params.items()}


# ---------------------------------------------------------------------------
# encoder

def patchify_embed(x: Tensor, P: dict, cfg: UnetrConfig) -> Tensor:
    """(C, S, S, S) volume -> (N, E) tokens, patches ordered with x fastest."""
    C, S, p, G = cfg.in_channels, cfg.img_size, cfg.patch_size, cfg.grid
    if x.shape != (C, S, S, S):
        raise ShapeMismatch(f"expected input {(C, S, S, S)}, got {x.shape}")
    t = ad.reshape(x, (C, G, p, G, p, G, p))
    # token index = ix + G*(iy + G*iz)
    t = ad.permute(t, (5, 3, 1, 0, 2, 4, 6))
    t = ad.reshape(t, (G ** 3, C * p ** 3))
    t = ad.linear(t, P["patch.w"], P["patch.b"])
    return ad.add(t, P["pos_embed"])


def tokens_to_grid(tokens: Tensor, cfg: UnetrConfig) -> Tensor:
    G, E = cfg.grid, cfg.embed_dim
    t = ad.reshape(tokens, (G, G, G, E))
    return ad.permute(t, (3, 2, 1, 0))


def _dropout(t: Tensor, rate: float, rng) -> Tensor:
    if rng is None or rate <= 0:
        return t
    keep = (rng.random(t.shape) >= rate).astype(t.dtype) / t.dtype.type(1 - rate)
    return ad.mul(t, Tensor(keep))


def attention(h: Tensor, P: dict, pre: str, cfg: UnetrConfig) -> Tensor:
    N, E, H = h.shape[0], cfg.embed_dim, cfg.num_heads
    D = E // H
    qkv = ad.linear(h, P[pre + "attn.qkv.w"], P[pre + "attn.qkv.b"])
    qkv = ad.permute(ad.reshape(qkv, (N, 3, H, D)), (1, 2, 0, 3))  # (3, H, N, D)
    q = ad.reshape(ad.slice_axis(qkv, 0, 0, 1), (H, N, D))
    k = ad.reshape(ad.slice_axis(qkv, 0, 1, 2), (H, N, D))
    v = ad.reshape(ad.slice_axis(qkv, 0, 2, 3), (H, N, D))
    scores = ad.scale(ad.matmul(q, ad.permute(k, (0, 2, 1))), 1.0 / np.sqrt(D))
    ctx = ad.matmul(ad.softmax_lastdim(scores), v)  # (H, N, D)
    ctx = ad.reshape(ad.permute(ctx, (1, 0, 2)), (N, E))
    return ad.linear(ctx, P[pre + "attn.out.w"], P[pre + "attn.out.b"])


def vit_layer(tokens: Tensor, P: dict, index: int, cfg: UnetrConfig, rng=None) -> Tensor:
    """Pre-norm block: t + MHA(LN(t)), then t + MLP(LN(t))."""
    if tokens.shape[-1] != cfg.embed_dim:
        raise ShapeMismatch(f"token width {tokens.shape[-1]} != embed_dim {cfg.embed_dim}")
    pre = f"layers.{index}."
    h = ad.layer_norm(tokens, P[pre + "ln1.g"], P[pre + "ln1.b"])
    tokens = ad.add(tokens, _dropout(attention(h, P, pre, cfg), cfg.dropout, rng))
    h = ad.layer_norm(tokens, P[pre + "ln2.g"], P[pre + "ln2.b"])
    h = ad.gelu(ad.linear(h, P[pre + "mlp.fc1.w"], P[pre + "mlp.fc1.b"]))
    h = ad.linear(h, P[pre + "mlp.fc2.w"], P[pre + "mlp.fc2.b"])
    return ad.add(tokens, _dropout(h, cfg.dropout, rng))


def encoder_forward(x: Tensor, P: dict, cfg: UnetrConfig, rng=None) -> dict:
    """Taps {0: input volume, l: (E, G, G, G) residual stream after layer l for l in skip_layers}."""
    taps = {0: x}
    t = patchify_embed(x, P, cfg)
    for i in range(cfg.num_layers):
        t = vit_layer(t, P, i, cfg, rng)
        if i + 1 in cfg.skip_layers:
            taps[i + 1] = tokens_to_grid(t, cfg)
    return taps


# ---------------------------------------------------------------------------
# decoder

def conv_block(x: Tensor, P: dict, conv: str, norm: str) -> Tensor:
    """3x3x3 conv (bias-free, the norm removes it) -> instance norm -> gelu."""
    h = ad.conv3d(x, P[conv + ".w"], None, stride=1, pad=1)
    return ad.gelu(ad.instance_norm(h, P[norm + ".g"], P[norm + ".b"]))


def _up(x: Tensor, P: dict, name: str) -> Tensor:
    return ad.conv_transpose3d(x, P[name + ".w"], P[name + ".b"], stride=2)


def decoder_forward(taps: dict, P: dict, cfg: UnetrConfig) -> Tensor:
    """Upsample the deepest tap level by level, concatenating processed skips on the way."""
    L = cfg.skip_layers
    processed = {"enc1": conv_block(taps[0], P, "enc1.conv", "enc1.norm")}
    for name, idx, stages in _SKIP_PLAN:
        h = taps[L[idx]]
        for k in range(stages):
            h = conv_block(_up(h, P, f"{name}.up{k}"), P, f"{name}.conv{k}", f"{name}.norm{k}")
        processed[name] = h

    h = taps[L[3]]
    for level in range(1, up_levels(cfg) + 1):
        name = f"dec{level}"
        h = _up(h, P, f"{name}.up")
        h = ad.concat_channels(h, *(processed[s] for s in skips_at(cfg, level)))
        h = conv_block(h, P, f"{name}.conv_a", f"{name}.norm_a")
        h = conv_block(h, P, f"{name}.conv_b", f"{name}.norm_b")
    return ad.conv3d(h, P["head.w"], P["head.b"])


def forward(x, P: dict, cfg: UnetrConfig, rng=None, taps_hook=None) -> Tensor:
    """Logits (out_channels, S, S, S). ``taps_hook`` may rewrite the tap dict (used for wiring checks)."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=next(iter(P.values())).dtype))
    taps = encoder_forward(x, P, cfg, rng)
    if taps_hook is not None:
        taps = taps_hook(taps)
    return decoder_forward(taps, P, cfg)


def predict(x, params: dict, cfg: UnetrConfig) -> np.ndarray:
    """Foreground probability per voxel: sigmoid of the single logit channel."""
    P = as_tensors(params)
    return ad.sigmoid(forward(x, P, cfg)).data


def checkpoint_bytes(params: dict, cfg: UnetrConfig, extra: Optional[dict] = None) -> bytes:
    meta = {"format": "unetr", "config": cfg.to_dict()}
    if extra:
        meta.update(extra)
    return ad.save_tensors(params, meta)


def load_checkpoint(blob: bytes) -> tuple[dict, UnetrConfig, dict]:
    named, meta = ad.load_tensors(blob)
    cfg = UnetrConfig.from_dict(meta["config"])
    params = {k: v for k, v in named.items() if k in param_shapes(cfg)}
    return params, cfg, meta
