from collections import OrderedDict
from dataclasses import asdict, dataclass
import logging

import numpy as np

from cilkit.errors import ShapeError
from cilkit.tensor import (
    Tensor,
    as_tensor,
    broadcast_to,
    concat,
    layer_norm,
    mean,
    relu,
    scaled_dot_product_attention,
    select,
)

logger = logging.getLogger(__name__)

POOLING_MODES = ("cls", "mean")


@dataclass
class BackboneConfig:
    num_blocks: int = 2
    embed_dim: int = 32
    num_heads: int = 4
    mlp_hidden: int = 64
    seq_len: int = 8
    token_dim: int = 16
    pooling: str = "cls"
    init_seed: int = 0

    def problems(self):
        """Return a list of validation messages (empty when valid)"""
        issues = []
        for name in ("num_blocks", "embed_dim", "num_heads", "mlp_hidden", "seq_len", "token_dim"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                issues.append(f"backbone.{name} must be a positive integer, got {value!r}")
        if (
            isinstance(self.embed_dim, int)
            and isinstance(self.num_heads, int)
            and self.num_heads > 0
            and self.embed_dim % self.num_heads
        ):
            issues.append(
                f"backbone.embed_dim ({self.embed_dim}) must be divisible by num_heads ({self.num_heads})"
            )
        if self.pooling not in POOLING_MODES:
            issues.append(f"backbone.pooling must be one of {POOLING_MODES}, got {self.pooling!r}")
        return issues

    def to_dict(self):
        return asdict(self)


class Backbone:
    """Tiny pre-norm transformer encoder with a class token"""

    def __init__(self, config, params=None):
        problems = config.problems()
        if problems:
            raise ShapeError("invalid backbone config: " + "; ".join(problems))
        self.config = config
        self.frozen = False
        self.params = params if params is not None else self._init_params(config)

    def __repr__(self):
        c = self.config
        return f"<Backbone L={c.num_blocks} d={c.embed_dim} heads={c.num_heads} frozen={self.frozen}>"

    @staticmethod
    def _init_params(config):
        rng = np.random.default_rng(config.init_seed)
        d, h, s = config.embed_dim, config.mlp_hidden, config.seq_len

        def dense(rows, cols):
            return Tensor(rng.normal(0.0, 1.0 / np.sqrt(rows), size=(rows, cols)), requires_grad=True)

        def vector(size, value=0.0):
            return Tensor(np.full(size, value), requires_grad=True)

        params = OrderedDict()
        params["token_proj.weight"] = dense(config.token_dim, d)
        params["token_proj.bias"] = vector(d)
        params["cls_token"] = Tensor(rng.normal(0.0, 0.02, size=(1, d)), requires_grad=True)
        params["pos_embed"] = Tensor(rng.normal(0.0, 0.02, size=(s + 1, d)), requires_grad=True)
        for b in range(config.num_blocks):
            prefix = f"blocks.{b}"
            params[f"{prefix}.ln1.gamma"] = vector(d, 1.0)
            params[f"{prefix}.ln1.beta"] = vector(d)
            params[f"{prefix}.attn.qkv.weight"] = dense(d, 3 * d)
            params[f"{prefix}.attn.qkv.bias"] = vector(3 * d)
            params[f"{prefix}.attn.proj.weight"] = dense(d, d)
            params[f"{prefix}.attn.proj.bias"] = vector(d)
            params[f"{prefix}.ln2.gamma"] = vector(d, 1.0)
            params[f"{prefix}.ln2.beta"] = vector(d)
            params[f"{prefix}.mlp.fc1.weight"] = dense(d, h)
            params[f"{prefix}.mlp.fc1.bias"] = vector(h)
            params[f"{prefix}.mlp.fc2.weight"] = dense(h, d)
            params[f"{prefix}.mlp.fc2.bias"] = vector(d)
        params["ln_final.gamma"] = vector(d, 1.0)
        params["ln_final.beta"] = vector(d)
        return params

    def parameters(self):
        return list(self.params.values())

    def freeze(self):
        """Stop gradient tracking on every backbone weight"""
        for p in self.params.values():
            p.requires_grad = False
            p.zero_grad()
        self.frozen = True

    def unfreeze(self):
        for p in self.params.values():
            p.requires_grad = True
        self.frozen = False

    def snapshot(self):
        """Copies of all weights, for bitwise freeze checks"""
        return OrderedDict((name, p.data.copy()) for name, p in self.params.items())

    def _p(self, block, name):
        return self.params[f"blocks.{block}.{name}"]

    def _check_block(self, block):
        if not 0 <= block < self.config.num_blocks:
            raise IndexError(f"block {block} out of range [0, {self.config.num_blocks})")

    def mlp(self, x, block):
        hidden = relu(x @ self._p(block, "mlp.fc1.weight") + self._p(block, "mlp.fc1.bias"))
        return hidden @ self._p(block, "mlp.fc2.weight") + self._p(block, "mlp.fc2.bias")

    def adapter_forward(self, x_i, block, adapters=None):
        """MLP(x_i) + ReLU(x_i W_down) W_up for one block"""
        self._check_block(block)
        x_i = as_tensor(x_i)
        out = self.mlp(x_i, block)
        if adapters is not None:
            out = out + adapters.residual(x_i, block)
        return out

    def attention(self, x, block):
        batch, tokens, d = x.shape
        heads = self.config.num_heads
        head_dim = d // heads
        qkv = x @ self._p(block, "attn.qkv.weight") + self._p(block, "attn.qkv.bias")
        qkv = qkv.reshape(batch, tokens, 3, heads, head_dim).transpose(2, 0, 3, 1, 4)
        q, k, v = (select(qkv, i, axis=0) for i in range(3))
        attended = scaled_dot_product_attention(q, k, v)
        merged = attended.transpose(0, 2, 1, 3).reshape(batch, tokens, d)
        return merged @ self._p(block, "attn.proj.weight") + self._p(block, "attn.proj.bias")

    def block_forward(self, x, block, adapters=None):
        h = x + self.attention(
            layer_norm(x, self._p(block, "ln1.gamma"), self._p(block, "ln1.beta")), block
        )
        normed = layer_norm(h, self._p(block, "ln2.gamma"), self._p(block, "ln2.beta"))
        return h + self.adapter_forward(normed, block, adapters)

    def embed(self, x, adapters=None):
        """
        Feature phi(x; A) of one instance (S, D_in) or a batch (B, S, D_in)

        Args:
            x: token array or Tensor
            adapters: optional AdapterSet whose residual joins every block's MLP

        Returns:
            Tensor of shape (d,) for one instance or (B, d) for a batch
        """
        c = self.config
        x = as_tensor(x)
        single = x.ndim == 2
        if single:
            x = x.reshape(1, *x.shape)
        if x.ndim != 3 or x.shape[2] != c.token_dim:
            raise ShapeError("token dimension mismatch", x.shape, (c.seq_len, c.token_dim))
        if x.shape[1] != c.seq_len:
            raise ShapeError("sequence length mismatch", x.shape, (c.seq_len, c.token_dim))
        if adapters is not None:
            adapters.check_compatible(c.num_blocks, c.embed_dim)

        batch = x.shape[0]
        tokens = x @ self.params["token_proj.weight"] + self.params["token_proj.bias"]
        cls = broadcast_to(self.params["cls_token"], (batch, 1, c.embed_dim))
        h = concat([cls, tokens], axis=1) + self.params["pos_embed"]
        for b in range(c.num_blocks):
            h = self.block_forward(h, b, adapters)
        h = layer_norm(h, self.params["ln_final.gamma"], self.params["ln_final.beta"])

        feature = select(h, 0, axis=1) if c.pooling == "cls" else mean(h, axis=1)
        if single:
            feature = feature.reshape(c.embed_dim)
        return feature
