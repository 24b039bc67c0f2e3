"""Transformer denoiser conditioned on the noise-schedule diagonal.

Each position i receives its own conditioning signal derived from the
schedule value a_i(s) through a sinusoidal embedding, so positions at
different noise levels are modulated differently (per-position adaptive
layer norm with shift/scale/gate, all zero-initialized). Self-attention
is masked on the key side: only valid positions can be attended to.
A learned absolute position embedding keeps the model position-aware even
under the synchronous schedule, where all schedule values coincide.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "DitConfig",
    "init_dit_params",
    "schedule_embedding",
    "masked_attention",
    "dit_forward",
]


@dataclass(frozen=True)
class DitConfig:
    n_max: int
    d_latent: int
    d_model: int = 128
    num_layers: int = 4
    num_heads: int = 4
    mlp_ratio: int = 4
    t_max_period: float = 10_000.0
    h_emb: int = 128

    def __post_init__(self):
        if self.d_model % self.num_heads != 0:
            raise ValueError("d_model must be divisible by num_heads")
        if self.t_max_period <= 1:
            raise ValueError("t_max_period must exceed 1")
        if self.h_emb < 1:
            raise ValueError("h_emb must be at least 1")

    @property
    def d_head(self) -> int:
        return self.d_model // self.num_heads


def schedule_embedding(a: np.ndarray, t_max_period: float, h_emb: int) -> np.ndarray:
    """Sinusoidal features of the schedule diagonal.

    arg[..., i, j] = a_i * t_max_period ** (-(j-1)/h_emb) for j = 1..h_emb;
    the output concatenates cos(arg) and sin(arg) on the last axis, giving
    shape (..., N, 2*h_emb). Equal schedule values produce equal rows.
    """
    a = np.asarray(a, dtype=np.float64)
    if np.any(a < 0) or np.any(a > 1):
        raise ValueError("schedule values must lie in [0, 1]")
    freqs = t_max_period ** (-np.arange(h_emb, dtype=np.float64) / h_emb)
    arg = a[..., None] * freqs
    return np.concatenate([np.cos(arg), np.sin(arg)], axis=-1)


def _linear(rng, fan_in, fan_out, name, params, zero=False):
    scale = 0.0 if zero else 1.0 / np.sqrt(fan_in)
    params[f"{name}.w"] = T.randn(rng, (fan_in, fan_out), scale=scale, requires_grad=True)
    params[f"{name}.b"] = T.zeros((fan_out,), requires_grad=True)


def init_dit_params(cfg: DitConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """All modulation projections and the output head start at zero, so a
    fresh model is the zero function."""
    p: dict[str, Tensor] = {}
    _linear(rng, cfg.d_latent, cfg.d_model, "in", p)
    p["pos"] = T.randn(rng, (cfg.n_max, cfg.d_model), scale=0.02, requires_grad=True)
    _linear(rng, 2 * cfg.h_emb, cfg.d_model, "cond.l0", p)
    _linear(rng, cfg.d_model, cfg.d_model, "cond.l1", p)
    for layer in range(cfg.num_layers):
        pre = f"blk{layer}"
        _linear(rng, cfg.d_model, 6 * cfg.d_model, f"{pre}.mod", p, zero=True)
        _linear(rng, cfg.d_model, cfg.d_model, f"{pre}.q", p)
        _linear(rng, cfg.d_model, cfg.d_model, f"{pre}.k", p)
        _linear(rng, cfg.d_model, cfg.d_model, f"{pre}.v", p)
        _linear(rng, cfg.d_model, cfg.d_model, f"{pre}.o", p)
        _linear(rng, cfg.d_model, cfg.mlp_ratio * cfg.d_model, f"{pre}.mlp0", p)
        _linear(rng, cfg.mlp_ratio * cfg.d_model, cfg.d_model, f"{pre}.mlp1", p)
    _linear(rng, cfg.d_model, 2 * cfg.d_model, "final.mod", p, zero=True)
    _linear(rng, cfg.d_model, cfg.d_latent, "head", p, zero=True)
    return p


def masked_attention(q: Tensor, k: Tensor, v: Tensor, key_mask: np.ndarray) -> Tensor:
    """Scaled dot-product attention restricted to unmasked key positions.

    q, k, v: (..., N, d_head); key_mask: (..., N) with 1 = attendable.
    Masked keys get -inf scores before the softmax, so outputs never
    depend on values at masked positions.
    """
    key_mask = np.asarray(key_mask, dtype=bool)
    if not np.all(np.any(key_mask, axis=-1)):
        raise ValueError("key mask must leave at least one attendable position")
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = (q @ k.swapaxes(-1, -2)) * scale
    blocked = np.broadcast_to(~key_mask[..., None, :], scores.shape)
    scores = scores.masked_fill(blocked, -np.inf)
    return scores.softmax(axis=-1) @ v


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    b, n, dm = x.shape
    return x.reshape(b, n, num_heads, dm // num_heads).transpose((0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return x.transpose((0, 2, 1, 3)).reshape(b, n, h * dh)


def _modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (scale + 1.0) + shift


def dit_forward(params: dict[str, Tensor], x_s, a: np.ndarray, key_mask: np.ndarray,
                cfg: DitConfig) -> Tensor:
    """Denoiser output, same shape as the input latents.

    x_s: (N, d_latent) or (B, N, d_latent); a: matching (N,) or (B, N)
    schedule diagonal; key_mask: (N,) or (B, N) validity mask.
    """
    x = x_s if isinstance(x_s, Tensor) else Tensor(x_s)
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = np.broadcast_to(a, (x.shape[0], a.shape[0]))
    key_mask = np.asarray(key_mask, dtype=bool)
    if key_mask.ndim == 1:
        key_mask = np.broadcast_to(key_mask, (x.shape[0], key_mask.shape[0]))
    if x.shape[1] != cfg.n_max or x.shape[2] != cfg.d_latent:
        raise ValueError(f"input shape {x.shape} does not match config "
                         f"(N={cfg.n_max}, d_latent={cfg.d_latent})")

    emb = Tensor(schedule_embedding(a, cfg.t_max_period, cfg.h_emb))
    c = T.silu(emb @ params["cond.l0.w"] + params["cond.l0.b"])
    c = c @ params["cond.l1.w"] + params["cond.l1.b"]
    c_act = T.silu(c)

    h = x @ params["in.w"] + params["in.b"]
    h = h + params["pos"].reshape(1, cfg.n_max, cfg.d_model)

    dm = cfg.d_model
    for layer in range(cfg.num_layers):
        pre = f"blk{layer}"
        mod = c_act @ params[f"{pre}.mod.w"] + params[f"{pre}.mod.b"]
        sh_a, sc_a, gate_a = mod[:, :, 0:dm], mod[:, :, dm:2 * dm], mod[:, :, 2 * dm:3 * dm]
        sh_m, sc_m, gate_m = (mod[:, :, 3 * dm:4 * dm], mod[:, :, 4 * dm:5 * dm],
                              mod[:, :, 5 * dm:6 * dm])

        y = _modulate(h.layer_norm(), sh_a, sc_a)
        q = _split_heads(y @ params[f"{pre}.q.w"] + params[f"{pre}.q.b"], cfg.num_heads)
        k = _split_heads(y @ params[f"{pre}.k.w"] + params[f"{pre}.k.b"], cfg.num_heads)
        v = _split_heads(y @ params[f"{pre}.v.w"] + params[f"{pre}.v.b"], cfg.num_heads)
        att = _merge_heads(masked_attention(q, k, v, key_mask[:, None, :]))
        h = h + gate_a * (att @ params[f"{pre}.o.w"] + params[f"{pre}.o.b"])

        y = _modulate(h.layer_norm(), sh_m, sc_m)
        y = T.gelu(y @ params[f"{pre}.mlp0.w"] + params[f"{pre}.mlp0.b"])
        h = h + gate_m * (y @ params[f"{pre}.mlp1.w"] + params[f"{pre}.mlp1.b"])

    mod = c_act @ params["final.mod.w"] + params["final.mod.b"]
    h = _modulate(h.layer_norm(), mod[:, :, 0:dm], mod[:, :, dm:2 * dm])
    out = h @ params["head.w"] + params["head.b"]
    return out.reshape(out.shape[1], out.shape[2]) if squeeze else out
