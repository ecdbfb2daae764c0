"""Tiny frozen text-to-text transformer with adapter injection points.

Encoder-decoder, single attention head, no layer norm: the smallest
architecture exposing all five site kinds (q, k, v, o, ff). Every weight is
built deterministically from the config seed and stays frozen; adapters are
passed into the forward pass as per-site deltas.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .tensor import (
    Tensor, add, embed, matmul, mul, no_grad, relu, scale, softmax,
    softmax_cross_entropy, transpose,
)

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3

NEG_INF = -1e9

# site kinds adaptable by each parametrization
LORA_KINDS = ("q", "k", "v", "o")
IA3_KINDS = ("k", "v", "ff")


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int
    model_dim: int = 32
    num_layers: int = 2
    ff_dim: int | None = None
    max_seq_len: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 4:
            raise ConfigurationError("vocab_size must be >= 4 (pad/bos/eos/unk)")
        if self.model_dim < 1 or self.num_layers < 1:
            raise ConfigurationError("model_dim and num_layers must be positive")

    @property
    def ff(self) -> int:
        return self.ff_dim if self.ff_dim is not None else 4 * self.model_dim


@dataclass(frozen=True)
class InjectionSite:
    site_id: str
    kind: str          # q | k | v | o | ff
    dim: int           # d for attention projections, ff_dim for ff
    layer: int         # transformer layer index within its stack


@dataclass
class LoraDelta:
    """Additive low-rank contribution x @ B @ A^T scaled by 1/rank."""
    A: Tensor
    B: Tensor
    scaling: float


@dataclass
class Ia3Delta:
    """Multiplicative rescaling vector applied to the site's activations."""
    l: Tensor


def _sinusoidal(max_len: int, d: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table


@dataclass
class FrozenBackbone:
    config: BackboneConfig
    params: dict[str, Tensor]
    pos: np.ndarray = field(repr=False)

    def weight_fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def attention_blocks(self) -> list[str]:
        blocks = []
        for i in range(self.config.num_layers):
            blocks.append(f"enc.{i}.attn")
            blocks.append(f"dec.{i}.attn")
            blocks.append(f"dec.{i}.cross")
        return blocks

    def injection_sites(self, parametrization: str) -> list[InjectionSite]:
        d, ff = self.config.model_dim, self.config.ff
        sites: list[InjectionSite] = []
        if parametrization == "lora":
            for block in self.attention_blocks():
                layer = int(block.split(".")[1])
                for kind in LORA_KINDS:
                    sites.append(InjectionSite(f"{block}.{kind}", kind, d, layer))
        elif parametrization == "ia3":
            for block in self.attention_blocks():
                layer = int(block.split(".")[1])
                for kind in ("k", "v"):
                    sites.append(InjectionSite(f"{block}.{kind}", kind, d, layer))
            for i in range(self.config.num_layers):
                sites.append(InjectionSite(f"enc.{i}.ff", "ff", ff, i))
                sites.append(InjectionSite(f"dec.{i}.ff", "ff", ff, i))
        else:
            raise ConfigurationError(f"unknown parametrization {parametrization!r}")
        return sites


def build_backbone(config: BackboneConfig) -> FrozenBackbone:
    """Deterministic scaled-Gaussian weights (std 1/sqrt(fan_in)) from the seed."""
    rng = np.random.default_rng(config.seed)
    d, ff, V, L = config.model_dim, config.ff, config.vocab_size, config.num_layers

    def gauss(rows, cols):
        return Tensor(rng.normal(scale=1.0 / np.sqrt(rows), size=(rows, cols)))

    params: dict[str, Tensor] = {"embed": gauss(V, d), "head": gauss(d, V)}
    for i in range(L):
        for kind in LORA_KINDS:
            params[f"enc.{i}.attn.{kind}"] = gauss(d, d)
        params[f"enc.{i}.ff.w1"] = gauss(d, ff)
        params[f"enc.{i}.ff.w2"] = gauss(ff, d)
    for i in range(L):
        for block in ("attn", "cross"):
            for kind in LORA_KINDS:
                params[f"dec.{i}.{block}.{kind}"] = gauss(d, d)
        params[f"dec.{i}.ff.w1"] = gauss(d, ff)
        params[f"dec.{i}.ff.w2"] = gauss(ff, d)
    return FrozenBackbone(config, params,
                          _sinusoidal(config.max_seq_len, d))


def _site_linear(x: Tensor, w: Tensor, delta) -> Tensor:
    h = matmul(x, w)
    if delta is None:
        return h
    if isinstance(delta, LoraDelta):
        low = matmul(matmul(x, delta.B), transpose(delta.A))
        return add(h, scale(low, delta.scaling))
    if isinstance(delta, Ia3Delta):
        return mul(h, delta.l)
    raise ConfigurationError(f"unsupported adapter delta {type(delta)!r}")


def _attention(x_q: Tensor, x_kv: Tensor, params, adapters, prefix: str,
               mask: np.ndarray | None, d: int) -> Tensor:
    q = _site_linear(x_q, params[f"{prefix}.q"], adapters.get(f"{prefix}.q"))
    k = _site_linear(x_kv, params[f"{prefix}.k"], adapters.get(f"{prefix}.k"))
    v = _site_linear(x_kv, params[f"{prefix}.v"], adapters.get(f"{prefix}.v"))
    scores = scale(matmul(q, transpose(k)), 1.0 / np.sqrt(d))
    if mask is not None:
        scores = add(scores, Tensor(mask))
    ctx = matmul(softmax(scores), v)
    return _site_linear(ctx, params[f"{prefix}.o"], adapters.get(f"{prefix}.o"))


def _ff(x: Tensor, params, adapters, prefix: str) -> Tensor:
    h = relu(matmul(x, params[f"{prefix}.w1"]))
    delta = adapters.get(prefix)
    if delta is not None:
        if not isinstance(delta, Ia3Delta):
            raise ConfigurationError("ff sites take multiplicative adapters only")
        h = mul(h, delta.l)
    return matmul(h, params[f"{prefix}.w2"])


def _pad_mask(ids: np.ndarray) -> np.ndarray:
    """(B, 1, n) additive mask hiding pad positions as attention keys."""
    return np.where(ids == PAD_ID, NEG_INF, 0.0)[:, None, :]


def _causal_mask(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), NEG_INF), k=1)


def encode(backbone: FrozenBackbone, adapters: dict, enc_ids: np.ndarray) -> Tensor:
    cfg = backbone.config
    enc_ids = np.atleast_2d(np.asarray(enc_ids, dtype=np.int64))
    if enc_ids.shape[1] > cfg.max_seq_len:
        raise ConfigurationError("input longer than max_seq_len")
    x = add(embed(backbone.params["embed"], enc_ids),
            Tensor(backbone.pos[:enc_ids.shape[1]]))
    mask = _pad_mask(enc_ids)
    for i in range(cfg.num_layers):
        x = add(x, _attention(x, x, backbone.params, adapters, f"enc.{i}.attn",
                              mask, cfg.model_dim))
        x = add(x, _ff(x, backbone.params, adapters, f"enc.{i}.ff"))
    return x


def decode_logits(backbone: FrozenBackbone, adapters: dict, enc_out: Tensor,
                  enc_ids: np.ndarray, dec_in: np.ndarray) -> Tensor:
    cfg = backbone.config
    dec_in = np.atleast_2d(np.asarray(dec_in, dtype=np.int64))
    if dec_in.shape[1] > cfg.max_seq_len:
        raise ConfigurationError("target longer than max_seq_len")
    m = dec_in.shape[1]
    x = add(embed(backbone.params["embed"], dec_in), Tensor(backbone.pos[:m]))
    self_mask = _causal_mask(m)[None, :, :] + np.where(
        dec_in == PAD_ID, NEG_INF, 0.0)[:, None, :]
    cross_mask = _pad_mask(np.atleast_2d(np.asarray(enc_ids, dtype=np.int64)))
    for i in range(cfg.num_layers):
        x = add(x, _attention(x, x, backbone.params, adapters, f"dec.{i}.attn",
                              self_mask, cfg.model_dim))
        x = add(x, _attention(x, enc_out, backbone.params, adapters,
                              f"dec.{i}.cross", cross_mask, cfg.model_dim))
        x = add(x, _ff(x, backbone.params, adapters, f"dec.{i}.ff"))
    return matmul(x, backbone.params["head"])


def forward(backbone: FrozenBackbone, adapters: dict, enc_ids: np.ndarray,
            dec_in: np.ndarray, labels: np.ndarray) -> tuple[Tensor, Tensor]:
    """Teacher-forced loss and logits for a (batched) example.

    enc_ids: (B, n) source tokens; dec_in: (B, m) bos-shifted targets;
    labels: (B, m) target tokens with PAD_ID at ignored positions.
    """
    enc_out = encode(backbone, adapters, enc_ids)
    logits = decode_logits(backbone, adapters, enc_out, enc_ids, dec_in)
    loss = softmax_cross_entropy(logits, np.atleast_2d(labels),
                                 ignore_id=PAD_ID)
    return loss, logits


def greedy_decode(backbone: FrozenBackbone, adapters: dict,
                  enc_ids: np.ndarray, max_len: int) -> list[list[int]]:
    """Greedy autoregressive decoding; returns token lists without bos/eos."""
    enc_ids = np.atleast_2d(np.asarray(enc_ids, dtype=np.int64))
    B = enc_ids.shape[0]
    with no_grad():
        enc_out = encode(backbone, adapters, enc_ids)
        dec = np.full((B, 1), BOS_ID, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        outs: list[list[int]] = [[] for _ in range(B)]
        for _ in range(max_len):
            logits = decode_logits(backbone, adapters, enc_out, enc_ids, dec)
            nxt = np.argmax(logits.data[:, -1, :], axis=-1)
            for b in range(B):
                if not done[b]:
                    if nxt[b] == EOS_ID:
                        done[b] = True
                    else:
                        outs[b].append(int(nxt[b]))
            if done.all():
                break
            dec = np.concatenate([dec, nxt[:, None]], axis=1)
    return outs
