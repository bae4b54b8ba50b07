"""Desk-scale transformer with the full architecture design space.

Covers both attention families (vector-wise softmax and pointwise
activation attention with length scaling and multiplicative masking) and
the normalization stack (LayerNorm, BatchNorm, the frozen affine fold,
polynomial LayerNorm, per-head score BatchNorm2D, extra MLP BatchNorm).

Blocks are pre-norm: x + attn(norm(x)), then x + mlp(norm(x)). Forward
passes can collect "taps": the pre-activation inputs of every activation
site and the per-token variance of every LayerNorm site, which drive both
range-minimization losses and conversion planning.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ArchitectureError, ConfigError, ShapeError
from .seeding import SeedStream

CHECKPOINT_MAGIC = b"PFCKPT01"


# ---------------------------------------------------------------------------
# configuration


@dataclass
class AttentionConfig:
    kind: str = "sigma"  # "softmax" | "sigma"
    sigma_activation: str = "gelu"  # "relu" | "gelu" | "squared_relu" | "poly"
    scale_fn: str = "inv_sqrt_len"  # "none" | "inv_sqrt_len" | "inv_len"
    scale_pos: str = "post"  # "pre" | "post" | "both"
    head_count: int = 2
    qk_batchnorm2d: bool = False

    def validate(self):
        if self.kind not in ("softmax", "sigma"):
            raise ConfigError(f"unknown attention kind {self.kind!r}")
        if self.sigma_activation not in ("relu", "gelu", "squared_relu", "poly"):
            raise ConfigError(f"unknown sigma activation {self.sigma_activation!r}")
        if self.scale_fn not in ("none", "inv_sqrt_len", "inv_len"):
            raise ConfigError(f"unknown scale_fn {self.scale_fn!r}")
        if self.scale_pos not in ("pre", "post", "both"):
            raise ConfigError(f"unknown scale_pos {self.scale_pos!r}")
        if self.head_count < 1:
            raise ConfigError("head_count must be positive")

    def scale_factor(self, length: int) -> float:
        """S(L): the stabilizing multiplier applied around the activation."""
        if self.scale_fn == "none":
            return 1.0
        if self.scale_fn == "inv_sqrt_len":
            return 1.0 / math.sqrt(length)
        return 1.0 / length


@dataclass
class NormConfig:
    kind: str = "layernorm"  # "layernorm" | "batchnorm" | "affine_frozen" | "poly_layernorm"
    extra_mlp_bn: bool = False
    epsilon: float = 1e-5

    def validate(self):
        if self.kind not in ("layernorm", "batchnorm", "affine_frozen", "poly_layernorm"):
            raise ConfigError(f"unknown norm kind {self.kind!r}")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")


@dataclass
class ModelConfig:
    depth: int = 2
    d_model: int = 64
    mlp_ratio: int = 4
    context: int = 64
    vocab: int | None = None
    patch_size: int | None = None
    num_classes: int | None = None
    image_size: int = 16
    mlp_activation: str = "gelu"  # "relu" | "gelu"
    use_positional: bool = True
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    norm: NormConfig = field(default_factory=NormConfig)
    seed: int = 0
    d_k: int | None = None  # defaults to d_model // head_count

    def validate(self):
        self.attention.validate()
        self.norm.validate()
        if self.depth < 1 or self.d_model < 1 or self.context < 1 or self.mlp_ratio < 1:
            raise ConfigError("model dimensions must be positive")
        if self.d_model % self.attention.head_count != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by head_count {self.attention.head_count}"
            )
        if (self.vocab is None) == (self.num_classes is None):
            raise ConfigError("specify exactly one of vocab (LM) or num_classes (vision)")
        if self.num_classes is not None:
            if self.patch_size is None or self.image_size % self.patch_size != 0:
                raise ConfigError("image_size must be divisible by patch_size")
        if self.mlp_activation not in ("relu", "gelu"):
            raise ConfigError(f"unknown mlp activation {self.mlp_activation!r}")

    @property
    def task(self) -> str:
        return "lm" if self.vocab is not None else "image"

    @property
    def head_dim(self) -> int:
        return self.d_k if self.d_k is not None else self.d_model // self.attention.head_count

    def to_dict(self) -> dict:
        out = {
            "depth": self.depth, "d_model": self.d_model, "mlp_ratio": self.mlp_ratio,
            "context": self.context, "vocab": self.vocab, "patch_size": self.patch_size,
            "num_classes": self.num_classes, "image_size": self.image_size,
            "mlp_activation": self.mlp_activation, "use_positional": self.use_positional,
            "seed": self.seed, "d_k": self.d_k,
            "attention": vars(self.attention).copy(),
            "norm": vars(self.norm).copy(),
        }
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        obj = dict(obj)
        att = AttentionConfig(**obj.pop("attention", {}))
        norm = NormConfig(**obj.pop("norm", {}))
        cfg = cls(attention=att, norm=norm, **obj)
        cfg.validate()
        return cfg


@dataclass
class MaskSpec:
    """Binary attention mask; entry [i, j] = 1 lets position i see j."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ShapeError(f"mask must be square, got {m.shape}")
        if not np.all((m == 0.0) | (m == 1.0)):
            raise ConfigError("mask entries must be 0 or 1")
        self.matrix = m

    @classmethod
    def causal(cls, length: int) -> "MaskSpec":
        return cls(np.tril(np.ones((length, length))))

    @classmethod
    def full(cls, length: int) -> "MaskSpec":
        return cls(np.ones((length, length)))


class Taps:
    """Per-forward collection of instrumented tensors."""

    def __init__(self):
        self.activations: list[tuple[str, str, T.Tensor]] = []  # (site, role, tensor)
        self.variances: list[tuple[str, T.Tensor]] = []  # (site, variance tensor)

    def add_activation(self, site: str, role: str, x: T.Tensor):
        self.activations.append((site, role, x))

    def add_variance(self, site: str, var: T.Tensor):
        self.variances.append((site, var))


# ---------------------------------------------------------------------------
# layers


class Linear:
    def __init__(self, name: str, d_in: int, d_out: int, rng: np.random.Generator,
                 init_scale: float = 0.02):
        self.name = name
        self.weight = T.Tensor(rng.normal(0.0, init_scale, (d_in, d_out)), requires_grad=True)
        self.bias = T.Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)

    def parameters(self):
        return [(f"{self.name}.weight", self.weight), (f"{self.name}.bias", self.bias)]


class NormLayer:
    """One normalization site in any of its four behavioural kinds.

    layernorm normalizes each token over features; batchnorm normalizes
    each feature over (batch, positions) with running statistics;
    affine_frozen is the inference-time constant fold of batchnorm;
    poly_layernorm replaces the inverse square root with a composite
    polynomial fitted to the recorded variance range.
    """

    MOMENTUM = 0.1

    def __init__(self, name: str, dim: int, cfg: NormConfig, kind: str | None = None):
        self.name = name
        self.dim = dim
        self.cfg = cfg
        self.kind = kind or cfg.kind
        self.gamma = T.Tensor(np.ones(dim), requires_grad=True)
        self.beta = T.Tensor(np.zeros(dim), requires_grad=True)
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.stats_initialized = False
        self.frozen_scale: np.ndarray | None = None
        self.frozen_shift: np.ndarray | None = None
        self.inv_sqrt_poly = None  # CompositePolynomial, set by conversion

    def parameters(self):
        if self.kind == "affine_frozen":
            return []
        return [(f"{self.name}.gamma", self.gamma), (f"{self.name}.beta", self.beta)]

    def _layernorm_core(self, x, taps):
        mu = T.reduce("mean", x, axis=-1, keepdims=True)
        centered = T.sub(x, mu)
        var = T.reduce("mean", T.mul(centered, centered), axis=-1, keepdims=True)
        if taps is not None:
            taps.add_variance(f"{self.name}.var", var)
        return centered, var

    def __call__(self, x: T.Tensor, mode: str = "eval", taps: Taps | None = None,
                 domain_mode: str = "strict", oob_counter: dict | None = None) -> T.Tensor:
        if self.kind == "layernorm":
            centered, var = self._layernorm_core(x, taps)
            inv = T.power(T.add(var, T.tensor(self.cfg.epsilon)), -0.5)
            inv.meta["site"] = f"{self.name}.invsqrt"
            return T.add(T.mul(T.mul(centered, inv), self.gamma), self.beta)

        if self.kind == "poly_layernorm":
            if self.inv_sqrt_poly is None:
                raise ArchitectureError(f"{self.name}: poly_layernorm without a fitted polynomial")
            centered, var = self._layernorm_core(x, taps)
            shifted = T.add(var, T.tensor(self.cfg.epsilon))
            inv = self.inv_sqrt_poly.eval_tensor(
                shifted, domain_mode=domain_mode, site=f"{self.name}.invsqrt",
                oob_counter=oob_counter,
            )
            return T.add(T.mul(T.mul(centered, inv), self.gamma), self.beta)

        if self.kind == "batchnorm":
            axes = tuple(range(x.ndim - 1))
            if mode == "train":
                mu = T.reduce("mean", x, axis=axes, keepdims=True)
                var = T.reduce("var", x, axis=axes, keepdims=True)
                m = self.MOMENTUM
                if not self.stats_initialized:
                    self.running_mean = mu.data.reshape(-1).copy()
                    self.running_var = var.data.reshape(-1).copy()
                    self.stats_initialized = True
                else:
                    self.running_mean = (1 - m) * self.running_mean + m * mu.data.reshape(-1)
                    self.running_var = (1 - m) * self.running_var + m * var.data.reshape(-1)
            else:
                if not self.stats_initialized:
                    raise ArchitectureError(
                        f"{self.name}: eval-mode batchnorm before any training batch"
                    )
                shape = (1,) * (x.ndim - 1) + (self.dim,)
                mu = T.tensor(self.running_mean.reshape(shape))
                var = T.tensor(self.running_var.reshape(shape))
            inv = T.power(T.add(var, T.tensor(self.cfg.epsilon)), -0.5)
            inv.meta["site"] = f"{self.name}.invsqrt"
            return T.add(T.mul(T.mul(T.sub(x, mu), inv), self.gamma), self.beta)

        if self.kind == "affine_frozen":
            if self.frozen_scale is None:
                raise ArchitectureError(f"{self.name}: affine_frozen without frozen statistics")
            return T.add(T.mul(x, T.tensor(self.frozen_scale)), T.tensor(self.frozen_shift))

        raise ConfigError(f"unknown norm kind {self.kind!r}")

    def freeze_affine(self):
        """Fold batchnorm running statistics into a constant affine map."""
        if not self.stats_initialized:
            raise ArchitectureError(f"{self.name}: cannot freeze before statistics exist")
        inv = 1.0 / np.sqrt(self.running_var + self.cfg.epsilon)
        self.frozen_scale = self.gamma.data * inv
        self.frozen_shift = self.beta.data - self.running_mean * self.gamma.data * inv
        self.kind = "affine_frozen"


def normalize(x: T.Tensor, layer: NormLayer, mode: str = "eval",
              taps: Taps | None = None) -> T.Tensor:
    """Apply one normalization site (see NormLayer for the kinds)."""
    return layer(x, mode=mode, taps=taps)


class HeadScoreNorm:
    """BatchNorm2D across attention heads on the score stack [B,H,L,L]."""

    MOMENTUM = 0.1

    def __init__(self, name: str, heads: int, epsilon: float = 1e-5):
        self.name = name
        self.heads = heads
        self.epsilon = epsilon
        self.gamma = T.Tensor(np.ones(heads), requires_grad=True)
        self.beta = T.Tensor(np.zeros(heads), requires_grad=True)
        self.running_mean = np.zeros(heads)
        self.running_var = np.ones(heads)
        self.stats_initialized = False
        self.frozen_scale: np.ndarray | None = None
        self.frozen_shift: np.ndarray | None = None
        self.frozen = False

    def parameters(self):
        return [(f"{self.name}.gamma", self.gamma), (f"{self.name}.beta", self.beta)]

    def __call__(self, scores: T.Tensor, mode: str = "eval") -> T.Tensor:
        gamma = T.reshape(self.gamma, (1, self.heads, 1, 1))
        beta = T.reshape(self.beta, (1, self.heads, 1, 1))
        if self.frozen:
            return T.add(
                T.mul(scores, T.tensor(self.frozen_scale.reshape(1, self.heads, 1, 1))),
                T.tensor(self.frozen_shift.reshape(1, self.heads, 1, 1)),
            )
        if mode == "train":
            mu = T.reduce("mean", scores, axis=(0, 2, 3), keepdims=True)
            var = T.reduce("var", scores, axis=(0, 2, 3), keepdims=True)
            m = self.MOMENTUM
            if not self.stats_initialized:
                self.running_mean = mu.data.reshape(-1).copy()
                self.running_var = var.data.reshape(-1).copy()
                self.stats_initialized = True
            else:
                self.running_mean = (1 - m) * self.running_mean + m * mu.data.reshape(-1)
                self.running_var = (1 - m) * self.running_var + m * var.data.reshape(-1)
        else:
            if not self.stats_initialized:
                raise ArchitectureError(f"{self.name}: eval before any training batch")
            mu = T.tensor(self.running_mean.reshape(1, self.heads, 1, 1))
            var = T.tensor(self.running_var.reshape(1, self.heads, 1, 1))
        inv = T.power(T.add(var, T.tensor(self.epsilon)), -0.5)
        return T.add(T.mul(T.mul(T.sub(scores, mu), inv), gamma), beta)

    def freeze_affine(self):
        if not self.stats_initialized:
            raise ArchitectureError(f"{self.name}: cannot freeze before statistics exist")
        inv = 1.0 / np.sqrt(self.running_var + self.epsilon)
        self.frozen_scale = self.gamma.data * inv
        self.frozen_shift = self.beta.data - self.running_mean * self.gamma.data * inv
        self.frozen = True


class AttentionLayer:
    """Multi-head attention, softmax or pointwise-activation flavored."""

    def __init__(self, name: str, cfg: AttentionConfig, d_model: int,
                 rng: np.random.Generator):
        self.name = name
        self.cfg = cfg
        self.d_model = d_model
        self.heads = cfg.head_count
        self.d_k = d_model // cfg.head_count
        self.wq = Linear(f"{name}.wq", d_model, d_model, rng)
        self.wk = Linear(f"{name}.wk", d_model, d_model, rng)
        self.wv = Linear(f"{name}.wv", d_model, d_model, rng)
        self.wo = Linear(f"{name}.wo", d_model, d_model, rng)
        self.head_norm = (
            HeadScoreNorm(f"{name}.qknorm", cfg.head_count) if cfg.qk_batchnorm2d else None
        )
        self.sigma_poly = None  # set by conversion when sigma_activation == "poly"

    def parameters(self):
        params = (self.wq.parameters() + self.wk.parameters()
                  + self.wv.parameters() + self.wo.parameters())
        if self.head_norm is not None:
            params += self.head_norm.parameters()
        return params

    def _split_heads(self, x: T.Tensor, batch: int, length: int) -> T.Tensor:
        x = T.reshape(x, (batch, length, self.heads, self.d_k))
        return T.transpose(x, (0, 2, 1, 3))

    def __call__(self, x: T.Tensor, mask: MaskSpec, mode: str = "eval",
                 taps: Taps | None = None, domain_mode: str = "strict",
                 oob_counter: dict | None = None) -> T.Tensor:
        batch, length, _ = x.shape
        q = self._split_heads(self.wq(x), batch, length)
        k = self._split_heads(self.wk(x), batch, length)
        v = self._split_heads(self.wv(x), batch, length)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(self.d_k))

        if self.cfg.kind == "softmax":
            neg = (mask.matrix - 1.0) * 1e9  # additive mask: -1e9 on blocked pairs
            logits = T.add(scores, T.tensor(neg[None, None]))
            weights = T.softmax(logits, axis=-1)
            weights.meta["site"] = f"{self.name}.softmax"
        else:
            if self.head_norm is not None:
                scores = self.head_norm(scores, mode=mode)
            s_factor = self.cfg.scale_factor(length)
            if self.cfg.scale_pos in ("pre", "both") and s_factor != 1.0:
                scores = T.scale(scores, s_factor)
            if taps is not None:
                taps.add_activation(f"{self.name}.act", "attention_activation", scores)
            weights = self._sigma(scores, domain_mode, oob_counter)
            if self.cfg.scale_pos in ("post", "both") and s_factor != 1.0:
                weights = T.scale(weights, s_factor)
            weights = T.mul(weights, T.tensor(mask.matrix[None, None]))

        out = T.matmul(weights, v)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (batch, length, self.d_model))
        return self.wo(out)

    def _sigma(self, scores: T.Tensor, domain_mode: str, oob_counter: dict | None) -> T.Tensor:
        act = self.cfg.sigma_activation
        if act == "relu":
            out = T.relu(scores)
            out.meta["site"] = f"{self.name}.act"
            return out
        if act == "gelu":
            out = T.gelu(scores)
            out.meta["site"] = f"{self.name}.act"
            return out
        if act == "squared_relu":
            r = T.relu(scores)
            r.meta["site"] = f"{self.name}.act"
            return T.mul(r, r)
        if act == "poly":
            if self.sigma_poly is None:
                raise ArchitectureError(f"{self.name}: poly attention without a fitted polynomial")
            return self.sigma_poly.eval_tensor(
                scores, domain_mode=domain_mode, site=f"{self.name}.act", oob_counter=oob_counter
            )
        raise ConfigError(f"unknown sigma activation {act!r}")


def attention_softmax(q: T.Tensor, k: T.Tensor, v: T.Tensor, mask: MaskSpec) -> T.Tensor:
    """Reference softmax attention on explicit [L, d_k] (or [B,H,L,d_k]) tensors."""
    d_k = q.shape[-1]
    scores = T.scale(T.matmul(q, _swap_last(k)), 1.0 / math.sqrt(d_k))
    neg = (mask.matrix - 1.0) * 1e9
    logits = T.add(scores, T.tensor(np.broadcast_to(neg, scores.shape).copy()))
    return T.matmul(T.softmax(logits, axis=-1), v)


def attention_sigma(q: T.Tensor, k: T.Tensor, v: T.Tensor, mask: MaskSpec,
                    cfg: AttentionConfig, poly=None) -> T.Tensor:
    """Pointwise-activation attention on explicit tensors.

    scores -> optional pre-scale -> sigma -> optional post-scale -> mask
    multiply -> value mix. The length used by S(L) is the query count.
    """
    d_k = q.shape[-1]
    length = q.shape[-2]
    scores = T.scale(T.matmul(q, _swap_last(k)), 1.0 / math.sqrt(d_k))
    s_factor = cfg.scale_factor(length)
    if cfg.scale_pos in ("pre", "both") and s_factor != 1.0:
        scores = T.scale(scores, s_factor)
    if cfg.sigma_activation == "relu":
        weights = T.relu(scores)
    elif cfg.sigma_activation == "gelu":
        weights = T.gelu(scores)
    elif cfg.sigma_activation == "squared_relu":
        r = T.relu(scores)
        weights = T.mul(r, r)
    elif cfg.sigma_activation == "poly":
        if poly is None:
            raise ArchitectureError("poly sigma activation requires a polynomial")
        weights = poly.eval_tensor(scores, domain_mode="clamp")
    else:
        raise ConfigError(f"unknown sigma activation {cfg.sigma_activation!r}")
    if cfg.scale_pos in ("post", "both") and s_factor != 1.0:
        weights = T.scale(weights, s_factor)
    weights = T.mul(weights, T.tensor(np.broadcast_to(mask.matrix, weights.shape).copy()))
    return T.matmul(weights, v)


def _swap_last(x: T.Tensor) -> T.Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return T.transpose(x, axes)


class Block:
    """Pre-norm transformer block: attention and MLP with residuals."""

    def __init__(self, name: str, cfg: ModelConfig, rng: np.random.Generator):
        d, ratio = cfg.d_model, cfg.mlp_ratio
        self.name = name
        self.cfg = cfg
        self.norm1 = NormLayer(f"{name}.norm1", d, cfg.norm)
        self.attn = AttentionLayer(f"{name}.attn", cfg.attention, d, rng)
        self.norm2 = NormLayer(f"{name}.norm2", d, cfg.norm)
        self.mlp_in = Linear(f"{name}.mlp_in", d, ratio * d, rng)
        self.mlp_out = Linear(f"{name}.mlp_out", ratio * d, d, rng)
        self.mlp_bn = (
            NormLayer(f"{name}.mlp_bn", ratio * d, cfg.norm, kind="batchnorm")
            if cfg.norm.extra_mlp_bn else None
        )
        self.mlp_poly = None  # set by conversion

    def parameters(self):
        params = self.norm1.parameters() + self.attn.parameters() + self.norm2.parameters()
        params += self.mlp_in.parameters() + self.mlp_out.parameters()
        if self.mlp_bn is not None:
            params += self.mlp_bn.parameters()
        return params

    def __call__(self, x: T.Tensor, mask: MaskSpec, mode: str = "eval",
                 taps: Taps | None = None, domain_mode: str = "strict",
                 oob_counter: dict | None = None) -> T.Tensor:
        h = self.norm1(x, mode=mode, taps=taps, domain_mode=domain_mode, oob_counter=oob_counter)
        x = T.add(x, self.attn(h, mask, mode=mode, taps=taps,
                               domain_mode=domain_mode, oob_counter=oob_counter))
        h = self.norm2(x, mode=mode, taps=taps, domain_mode=domain_mode, oob_counter=oob_counter)
        h = self.mlp_in(h)
        if taps is not None:
            taps.add_activation(f"{self.name}.mlp.act", "mlp_activation", h)
        h = self._mlp_activation(h, domain_mode, oob_counter)
        if self.mlp_bn is not None:
            h = self.mlp_bn(h, mode=mode)
        h = self.mlp_out(h)
        return T.add(x, h)

    def _mlp_activation(self, h, domain_mode, oob_counter):
        if self.mlp_poly is not None:
            return self.mlp_poly.eval_tensor(
                h, domain_mode=domain_mode, site=f"{self.name}.mlp.act", oob_counter=oob_counter
            )
        out = T.relu(h) if self.cfg.mlp_activation == "relu" else T.gelu(h)
        out.meta["site"] = f"{self.name}.mlp.act"
        return out


class TransformerModel:
    """Token or patch transformer assembled from the config."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        rng = SeedStream(cfg.seed).rng("model-init")
        d = cfg.d_model
        if cfg.task == "lm":
            self.token_table = T.Tensor(rng.normal(0, 0.02, (cfg.vocab, d)), requires_grad=True)
            self.patch_embed = None
            self.length = cfg.context
        else:
            patch_dim = cfg.patch_size * cfg.patch_size
            self.token_table = None
            self.patch_embed = Linear("patch_embed", patch_dim, d, rng)
            self.length = (cfg.image_size // cfg.patch_size) ** 2
        self.pos_embed = (
            T.Tensor(rng.normal(0, 0.02, (self.length, d)), requires_grad=True)
            if cfg.use_positional else None
        )
        self.blocks = [Block(f"block{i}", cfg, rng) for i in range(cfg.depth)]
        self.final_norm = NormLayer("final_norm", d, cfg.norm)
        out_dim = cfg.vocab if cfg.task == "lm" else cfg.num_classes
        self.head = Linear("head", d, out_dim, rng)
        self.poly_domain_mode = "strict"
        self.oob_counter: dict[str, int] = {}

    # -- parameters & checkpointing

    def parameters(self) -> list[tuple[str, T.Tensor]]:
        params = []
        if self.token_table is not None:
            params.append(("token_table", self.token_table))
        if self.patch_embed is not None:
            params += self.patch_embed.parameters()
        if self.pos_embed is not None:
            params.append(("pos_embed", self.pos_embed))
        for b in self.blocks:
            params += b.parameters()
        params += self.final_norm.parameters()
        params += self.head.parameters()
        return params

    def norm_layers(self) -> list[NormLayer]:
        layers = []
        for b in self.blocks:
            layers += [b.norm1, b.norm2]
            if b.mlp_bn is not None:
                layers.append(b.mlp_bn)
        layers.append(self.final_norm)
        return layers

    # -- forward passes

    def embed_tokens(self, tokens: np.ndarray) -> T.Tensor:
        tokens = np.asarray(tokens)
        if tokens.max(initial=0) >= self.cfg.vocab or tokens.min(initial=0) < 0:
            raise ShapeError(
                f"token id out of vocab: max {tokens.max()}, vocab {self.cfg.vocab}"
            )
        emb = T.embedding(self.token_table, tokens)
        emb.meta["graph_input"] = "tokens_embedded"
        return emb

    def forward_embedded(self, x: T.Tensor, mask: MaskSpec, mode: str = "eval",
                         taps: Taps | None = None) -> T.Tensor:
        if self.pos_embed is not None:
            x = T.add(x, self.pos_embed)
        for block in self.blocks:
            x = block(x, mask, mode=mode, taps=taps,
                      domain_mode=self.poly_domain_mode, oob_counter=self.oob_counter)
        x = self.final_norm(x, mode=mode, taps=taps,
                            domain_mode=self.poly_domain_mode, oob_counter=self.oob_counter)
        return x

    def lm_logits(self, tokens: np.ndarray, mode: str = "eval",
                  taps: Taps | None = None) -> T.Tensor:
        mask = MaskSpec.causal(np.asarray(tokens).shape[1])
        x = self.embed_tokens(tokens)
        x = self.forward_embedded(x, mask, mode=mode, taps=taps)
        return self.head(x)

    def image_logits(self, images: np.ndarray, mode: str = "eval",
                     taps: Taps | None = None) -> T.Tensor:
        x = self.patchify(images)
        x = self.patch_embed(x)
        mask = MaskSpec.full(self.length)
        x = self.forward_embedded(x, mask, mode=mode, taps=taps)
        pooled = T.reduce("mean", x, axis=1)
        return self.head(pooled)

    def patchify(self, images: np.ndarray) -> T.Tensor:
        """[B, S, S] pixels -> [B, L, patch*patch] patch rows."""
        images = np.asarray(images, dtype=np.float64)
        b, s1, s2 = images.shape
        p = self.cfg.patch_size
        if s1 != self.cfg.image_size or s2 != self.cfg.image_size:
            raise ShapeError(f"expected {self.cfg.image_size}x{self.cfg.image_size} images, got {s1}x{s2}")
        g = s1 // p
        x = T.tensor(images)
        x.meta["graph_input"] = "image_pixels"
        x = T.reshape(x, (b, g, p, g, p))
        x = T.transpose(x, (0, 1, 3, 2, 4))
        return T.reshape(x, (b, g * g, p * p))

    # -- losses

    def lm_loss(self, tokens: np.ndarray, targets: np.ndarray, mode: str = "eval",
                taps: Taps | None = None) -> tuple[T.Tensor, T.Tensor]:
        """Mean next-token cross entropy; returns (loss, logits)."""
        logits = self.lm_logits(tokens, mode=mode, taps=taps)
        return cross_entropy(logits, np.asarray(targets), self.cfg.vocab), logits

    def image_loss(self, images: np.ndarray, labels: np.ndarray, mode: str = "eval",
                   taps: Taps | None = None) -> tuple[T.Tensor, T.Tensor]:
        logits = self.image_logits(images, mode=mode, taps=taps)
        return cross_entropy(logits, np.asarray(labels), self.cfg.num_classes), logits

    # -- checkpoint i/o

    def save_checkpoint(self, path: str | Path):
        """JSON manifest + little-endian float64 parameter blob."""
        path = Path(path)
        params = self.parameters()
        manifest = {
            "config": self.cfg.to_dict(),
            "seed": self.cfg.seed,
            "params": [{"name": n, "shape": list(p.shape)} for n, p in params],
            "extra_state": self._extra_state(),
        }
        path.with_suffix(".json").write_text(json.dumps(manifest, indent=2))
        flat = np.concatenate([p.data.reshape(-1) for n, p in params]) if params else np.zeros(0)
        with open(path.with_suffix(".bin"), "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<Q", flat.size))
            fh.write(flat.astype("<f8").tobytes())

    def _extra_state(self) -> dict:
        state = {}
        for layer in self.norm_layers():
            if layer.stats_initialized:
                state[layer.name] = {
                    "running_mean": layer.running_mean.tolist(),
                    "running_var": layer.running_var.tolist(),
                }
        for b in self.blocks:
            hn = b.attn.head_norm
            if hn is not None and hn.stats_initialized:
                state[hn.name] = {
                    "running_mean": hn.running_mean.tolist(),
                    "running_var": hn.running_var.tolist(),
                }
        return state

    @classmethod
    def load_checkpoint(cls, path: str | Path) -> "TransformerModel":
        path = Path(path)
        manifest = json.loads(path.with_suffix(".json").read_text())
        model = cls(ModelConfig.from_dict(manifest["config"]))
        raw = Path(path.with_suffix(".bin")).read_bytes()
        if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
            raise ConfigError(f"bad checkpoint magic in {path.with_suffix('.bin')}")
        (count,) = struct.unpack_from("<Q", raw, len(CHECKPOINT_MAGIC))
        flat = np.frombuffer(raw, dtype="<f8", offset=len(CHECKPOINT_MAGIC) + 8)
        if flat.size != count:
            raise ConfigError(
                f"checkpoint length mismatch: header {count}, payload {flat.size}"
            )
        offset = 0
        params = model.parameters()
        if len(params) != len(manifest["params"]):
            raise ConfigError("checkpoint parameter list does not match model")
        for (name, tensor), meta in zip(params, manifest["params"]):
            size = int(np.prod(meta["shape"])) if meta["shape"] else 1
            tensor.data = flat[offset: offset + size].reshape(meta["shape"]).copy()
            offset += size
        if offset != count:
            raise ConfigError("checkpoint payload does not cover all parameters")
        extra = manifest.get("extra_state", {})
        for layer in model.norm_layers():
            if layer.name in extra:
                layer.running_mean = np.array(extra[layer.name]["running_mean"])
                layer.running_var = np.array(extra[layer.name]["running_var"])
                layer.stats_initialized = True
        for b in model.blocks:
            hn = b.attn.head_norm
            if hn is not None and hn.name in extra:
                hn.running_mean = np.array(extra[hn.name]["running_mean"])
                hn.running_var = np.array(extra[hn.name]["running_var"])
                hn.stats_initialized = True
        return model


def cross_entropy(logits: T.Tensor, targets: np.ndarray, num_classes: int) -> T.Tensor:
    """Mean cross entropy from raw logits over the last axis."""
    targets = np.asarray(targets)
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= num_classes:
        raise ShapeError(f"target id out of range: {targets.max()} vs {num_classes}")
    m = T.reduce("max", logits, axis=logits.ndim - 1, keepdims=True)
    z = T.sub(logits, m)
    lse = T.add(T.log(T.reduce("sum", T.exp(z), axis=logits.ndim - 1, keepdims=True)), m)
    onehot = np.zeros(logits.shape)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    picked = T.reduce("sum", T.mul(logits, T.tensor(onehot)), axis=logits.ndim - 1, keepdims=True)
    return T.reduce("mean", T.sub(lse, picked))


def perplexity(loss_value: float) -> float:
    return float(math.exp(loss_value))
