"""Compact vision-transformer encoder with a reverse-mode gradient path.

An image becomes ``M`` non-overlapping patches plus a class token; after
``depth`` pre-norm transformer blocks and a final layer norm the class-token
output is the global embedding and the patch-token outputs are the local
embeddings.
"""
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .errors import DimensionMismatch, InvalidConfig, NonFiniteLoss

INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 2.0
    pixel_mean: float = 0.5
    pixel_std: float = 0.25

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0 or self.image_size % self.patch_size:
            raise InvalidConfig(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.heads <= 0 or self.embed_dim % self.heads:
            raise InvalidConfig(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.depth < 0 or self.channels <= 0 or self.mlp_hidden <= 0 or self.pixel_std <= 0:
            raise InvalidConfig("depth must be >= 0; channels, mlp width and pixel_std must be positive")

    @property
    def num_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * self.channels

    @property
    def mlp_hidden(self):
        return int(round(self.embed_dim * self.mlp_ratio))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class DualEmbedding:
    global_: np.ndarray
    local: np.ndarray


def param_shapes(config):
    """Ordered mapping of parameter name to shape."""
    c, h = config.embed_dim, config.mlp_hidden
    shapes = {
        "patch_embed.weight": (config.patch_dim, c),
        "patch_embed.bias": (c,),
        "cls_token": (c,),
        "pos_embed": (config.num_patches + 1, c),
    }
    for i in range(config.depth):
        p = f"blocks.{i}."
        shapes.update(
            {
                p + "norm1.weight": (c,),
                p + "norm1.bias": (c,),
                p + "attn.qkv.weight": (c, 3 * c),
                p + "attn.qkv.bias": (3 * c,),
                p + "attn.proj.weight": (c, c),
                p + "attn.proj.bias": (c,),
                p + "norm2.weight": (c,),
                p + "norm2.bias": (c,),
                p + "mlp.fc1.weight": (c, h),
                p + "mlp.fc1.bias": (h,),
                p + "mlp.fc2.weight": (h, c),
                p + "mlp.fc2.bias": (c,),
            }
        )
    shapes["norm.weight"] = (c,)
    shapes["norm.bias"] = (c,)
    return shapes


def _trunc_normal(rng, shape, std):
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def init_params(config, seed):
    """Deterministic parameter set: truncated normal (std 0.02) weights, zero
    biases, unit layer-norm gains."""
    if not isinstance(config, EncoderConfig):
        raise InvalidConfig("config must be an EncoderConfig")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("norm1.weight") or name.endswith("norm2.weight") or name == "norm.weight":
            params[name] = np.ones(shape)
        elif name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            params[name] = _trunc_normal(rng, shape, INIT_STD)
    return params


def param_count(params):
    return int(sum(v.size for v in params.values()))


def preprocess(images, config):
    """Pixel stack ``(B, H, W, C)`` in [0, 1] -> standardized patches ``(B, M, P)``.

    Patches are ordered row-major over the patch grid; each patch is flattened
    in (row, col, channel) order.
    """
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    s, p, ch = config.image_size, config.patch_size, config.channels
    if x.ndim != 4 or x.shape[1:] != (s, s, ch):
        raise DimensionMismatch(f"expected images of shape (*, {s}, {s}, {ch}), got {x.shape}")
    x = (x - config.pixel_mean) / config.pixel_std
    g = s // p
    x = x.reshape(x.shape[0], g, p, g, p, ch).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(x.shape[0], g * g, p * p * ch)


def _forward(tparams, patches, config, record=None):
    B = patches.shape[0]
    c, nh = config.embed_dim, config.heads
    hd = c // nh
    T = config.num_patches + 1
    x = ad.matmul(ad.Tensor(patches), tparams["patch_embed.weight"]) + tparams["patch_embed.bias"]
    cls = ad.broadcast_to(ad.reshape(tparams["cls_token"], (1, 1, c)), (B, 1, c))
    x = ad.concat([cls, x], axis=1) + tparams["pos_embed"]
    scale = 1.0 / np.sqrt(hd)
    for i in range(config.depth):
        p = f"blocks.{i}."
        h = ad.layer_norm(x, tparams[p + "norm1.weight"], tparams[p + "norm1.bias"])
        qkv = ad.matmul(h, tparams[p + "attn.qkv.weight"]) + tparams[p + "attn.qkv.bias"]
        qkv = ad.transpose(ad.reshape(qkv, (B, T, 3, nh, hd)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = ad.softmax(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * scale, axis=-1)
        if record is not None:
            record.append(att.data.copy())
        out = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (B, T, c))
        x = x + (ad.matmul(out, tparams[p + "attn.proj.weight"]) + tparams[p + "attn.proj.bias"])
        h = ad.layer_norm(x, tparams[p + "norm2.weight"], tparams[p + "norm2.bias"])
        h = ad.gelu(ad.matmul(h, tparams[p + "mlp.fc1.weight"]) + tparams[p + "mlp.fc1.bias"])
        x = x + (ad.matmul(h, tparams[p + "mlp.fc2.weight"]) + tparams[p + "mlp.fc2.bias"])
    x = ad.layer_norm(x, tparams["norm.weight"], tparams["norm.bias"])
    return x[:, 0, :], x[:, 1:, :]


def _constants(params):
    return {k: ad.Tensor(v) for k, v in params.items()}


def encode_batch(params, images, config, with_attention=False):
    """Encode a stack of images without building a gradient graph.

    Returns ``(global (B, c), local (B, M, c))`` and, when requested, a list of
    per-layer attention arrays of shape ``(B, heads, M+1, M+1)``.
    """
    record = [] if with_attention else None
    g, l = _forward(_constants(params), preprocess(images, config), config, record)
    if with_attention:
        return g.data, l.data, record
    return g.data, l.data


def encode(params, image, config):
    """Encode one ``H x W x C`` image.

    Returns the :class:`DualEmbedding` and the attention record, a list over
    layers of ``(heads, M+1, M+1)`` row-stochastic arrays.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise DimensionMismatch(f"expected a single H x W x C image, got shape {image.shape}")
    g, l, att = encode_batch(params, image[None], config, with_attention=True)
    return DualEmbedding(g[0], l[0]), [a[0] for a in att]


def forward_graph(params, images, config):
    """Build a differentiable forward pass.

    Returns ``(tparams, global_tensor, local_tensor)`` where ``tparams`` maps
    names to leaf tensors whose ``.grad`` is filled by ``backward``.
    """
    tparams = {k: ad.parameter(v, name=k) for k, v in params.items()}
    g, l = _forward(tparams, preprocess(images, config), config)
    return tparams, g, l


def grad(params, loss_fn, images, config):
    """Loss value and exact gradients of ``loss_fn(global, local)`` w.r.t. ``params``.

    ``loss_fn`` receives the global ``(B, c)`` and local ``(B, M, c)`` tensors and
    must return a scalar :class:`~stn.autodiff.Tensor`.

    Raises
    ------
    NonFiniteLoss
        If the loss is NaN or infinite.
    """
    tparams, g, l = forward_graph(params, images, config)
    loss = ad.as_tensor(loss_fn(g, l))
    value = float(loss.data)
    if not np.isfinite(value):
        raise NonFiniteLoss(f"loss is {value}")
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    if loss.requires_grad:
        loss.backward()
        for k, t in tparams.items():
            if t.grad is not None:
                grads[k] = t.grad
    return value, grads
