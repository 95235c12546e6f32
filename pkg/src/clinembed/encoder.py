"""Pre-layer-norm transformer encoder built on the autodiff ops."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError


@dataclass
class EncoderConfig:
    depth: int = 1
    heads: int = 1
    dim: int = 128
    ffn_mult: int = 4
    dropout: float = 0.0
    max_seq: int = 64
    positional: bool = False

    def validate(self):
        if self.depth < 1:
            raise ConfigError("encoder depth must be >= 1")
        if self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} must be divisible by heads {self.heads}")
        if self.dropout != 0.0:
            raise ConfigError("dropout is not supported; use 0.0")
        if self.max_seq < 1 or self.ffn_mult < 1:
            raise ConfigError("max_seq and ffn_mult must be positive")

    def to_dict(self):
        return asdict(self)


_LAYER_KEYS = ("Wq", "Wk", "Wv", "Wo", "ln1_g", "ln1_b", "ln2_g", "ln2_b", "W1", "b1", "W2", "b2")


def init_encoder(config: EncoderConfig, rng: np.random.Generator, prefix="encoder.") -> dict:
    """Parameter dict ``name -> Tensor``; weights uniform in +-1/sqrt(fan_in)."""
    config.validate()
    m, hidden = config.dim, config.ffn_mult * config.dim

    def u(fan_in, *shape):
        b = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-b, b, size=shape), requires_grad=True)

    params = {}
    for layer in range(config.depth):
        p = f"{prefix}layer{layer}."
        for name in ("Wq", "Wk", "Wv", "Wo"):
            params[p + name] = u(m, m, m)
        params[p + "ln1_g"] = Tensor(np.ones(m), requires_grad=True)
        params[p + "ln1_b"] = Tensor(np.zeros(m), requires_grad=True)
        params[p + "ln2_g"] = Tensor(np.ones(m), requires_grad=True)
        params[p + "ln2_b"] = Tensor(np.zeros(m), requires_grad=True)
        params[p + "W1"] = u(m, m, hidden)
        params[p + "b1"] = Tensor(np.zeros(hidden), requires_grad=True)
        params[p + "W2"] = u(hidden, hidden, m)
        params[p + "b2"] = Tensor(np.zeros(m), requires_grad=True)
    if config.positional:
        params[prefix + "positions"] = u(m, config.max_seq, m)
    return params


def add_positions(seq: Tensor, positions: Tensor) -> Tensor:
    """Add learned position vectors ``positions[:L]`` to a ``(..., L, m)`` sequence."""
    L = seq.shape[-2]
    if L > positions.shape[0]:
        raise ConfigError(f"sequence length {L} exceeds position table {positions.shape[0]}")
    return ad.add(seq, ad.index(positions, slice(0, L)))


def attention_mask(L: int, causal: bool, key_valid=None):
    """Boolean ``(B or 1, 1, L, L)`` mask of allowed query->key pairs."""
    allowed = np.tril(np.ones((L, L), dtype=bool)) if causal else np.ones((L, L), dtype=bool)
    allowed = allowed[None, None]
    if key_valid is not None:
        allowed = allowed & np.asarray(key_valid, dtype=bool)[:, None, None, :]
    return allowed


def _attention(h, p, heads, mask, trace):
    B, L, m = h.shape
    q = ad.matmul(h, p["Wq"])
    k = ad.matmul(h, p["Wk"])
    v = ad.matmul(h, p["Wv"])
    dh = m // heads
    if heads == 1:
        q, k, v = (ad.reshape(t, (B, 1, L, m)) for t in (q, k, v))
    else:
        q, k, v = (ad.transpose(ad.reshape(t, (B, L, heads, dh)), (0, 2, 1, 3)) for t in (q, k, v))
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    attn = ad.softmax(scores, axis=-1, mask=mask)
    if trace is not None:
        trace.append(attn.data)
    ctx = ad.matmul(attn, v)
    if heads == 1:
        ctx = ad.reshape(ctx, (B, L, m))
    else:
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, L, m))
    return ad.matmul(ctx, p["Wo"])


def encode(seq: Tensor, params: dict, config: EncoderConfig, causal: bool,
           key_valid=None, prefix="encoder.", trace: list | None = None) -> Tensor:
    """Contextual embeddings for ``seq`` of shape ``(L, m)`` or ``(B, L, m)``.

    ``key_valid`` (B x L booleans) hides padded keys.  When ``trace`` is a list,
    each layer's attention weights are appended to it.
    """
    squeeze = seq.ndim == 2
    x = ad.reshape(seq, (1,) + seq.shape) if squeeze else seq
    B, L, m = x.shape
    if L > config.max_seq:
        raise ConfigError(f"sequence length {L} exceeds max_seq {config.max_seq}")
    if m != config.dim:
        raise ConfigError(f"input dim {m} does not match encoder dim {config.dim}")
    if config.positional:
        x = add_positions(x, params[prefix + "positions"])
    mask = attention_mask(L, causal, key_valid)
    for layer in range(config.depth):
        p = {k: params[f"{prefix}layer{layer}.{k}"] for k in _LAYER_KEYS}
        h = ad.layer_norm(x, p["ln1_g"], p["ln1_b"])
        x = ad.add(x, _attention(h, p, config.heads, mask, trace))
        h = ad.layer_norm(x, p["ln2_g"], p["ln2_b"])
        ff = ad.add(ad.matmul(ad.gelu(ad.add(ad.matmul(h, p["W1"]), p["b1"])), p["W2"]), p["b2"])
        x = ad.add(x, ff)
    return ad.reshape(x, (L, m)) if squeeze else x
