"""Event autoencoder: (tau, type) -> d-dim latent -> (tau estimate, type logits).

The encoder maps a standardized duration plus a one-hot type to the mean
and log-variance of a Gaussian posterior; the decoder maps a latent back
to a duration estimate and unnormalized type logits. The KL term is
weighted by a beta that ramps linearly from beta_min to beta_max over the
first half of training. Encoder and decoder weights are frozen after
training; downstream diffusion operates on posterior means.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Dataset, Event, pad_and_mask
from .optim import Adam, TrainingDivergedError
from .tensor import Tensor

__all__ = [
    "VaeConfig",
    "VaeTrainConfig",
    "LatentSequence",
    "init_vae_params",
    "encode",
    "encode_batch",
    "reparameterize",
    "decode",
    "decode_batch",
    "kl_term",
    "vae_loss",
    "beta_schedule",
    "train_vae",
    "encode_dataset",
    "reconstruction_metrics",
    "params_checksum",
]

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0


@dataclass(frozen=True)
class VaeConfig:
    num_types: int
    d_latent: int = 32
    hidden: int = 64


@dataclass(frozen=True)
class VaeTrainConfig:
    steps: int = 2000
    batch_size: int = 128
    lr: float = 1e-3
    beta_min: float = 1e-5
    beta_max: float = 1e-2
    seed: int = 0


@dataclass
class LatentSequence:
    """Padded N x d latent matrix with its validity mask; masked rows are zero."""

    latents: np.ndarray
    mask: np.ndarray


def _linear(rng: np.random.Generator, fan_in: int, fan_out: int, name: str,
            params: dict, zero: bool = False) -> None:
    scale = 0.0 if zero else 1.0 / np.sqrt(fan_in)
    params[f"{name}.w"] = T.randn(rng, (fan_in, fan_out), scale=scale, requires_grad=True)
    params[f"{name}.b"] = T.zeros((fan_out,), requires_grad=True)


def init_vae_params(cfg: VaeConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Two hidden tanh layers each side; output heads start at zero."""
    p: dict[str, Tensor] = {}
    _linear(rng, 1 + cfg.num_types, cfg.hidden, "enc.l0", p)
    _linear(rng, cfg.hidden, cfg.hidden, "enc.l1", p)
    _linear(rng, cfg.hidden, 2 * cfg.d_latent, "enc.head", p, zero=True)
    _linear(rng, cfg.d_latent, cfg.hidden, "dec.l0", p)
    _linear(rng, cfg.hidden, cfg.hidden, "dec.l1", p)
    _linear(rng, cfg.hidden, 1, "dec.tau", p, zero=True)
    _linear(rng, cfg.hidden, cfg.num_types, "dec.logits", p, zero=True)
    return p


def _features(taus: np.ndarray, types: np.ndarray, num_types: int) -> np.ndarray:
    onehot = np.eye(num_types)[np.asarray(types, dtype=np.int64)]
    return np.concatenate([np.asarray(taus, dtype=np.float64)[:, None], onehot], axis=1)


def _mlp(params: dict[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    h = (x @ params[f"{prefix}.l0.w"] + params[f"{prefix}.l0.b"]).tanh()
    return (h @ params[f"{prefix}.l1.w"] + params[f"{prefix}.l1.b"]).tanh()


def encode_batch(params: dict[str, Tensor], taus: np.ndarray, types: np.ndarray,
                 num_types: int) -> tuple[Tensor, Tensor]:
    """Posterior mean and log-variance for a batch of events, shape (B, d) each."""
    x = Tensor(_features(taus, types, num_types))
    h = _mlp(params, "enc", x)
    out = h @ params["enc.head.w"] + params["enc.head.b"]
    d = out.shape[-1] // 2
    return out[:, :d], out[:, d:]


def encode(params: dict[str, Tensor], cfg: VaeConfig, event: Event
           ) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic posterior (mu, logvar) of one standardized event."""
    with T.no_grad():
        mu, logvar = encode_batch(params, np.array([event.tau]), np.array([event.k]),
                                  cfg.num_types)
    return mu.data[0].copy(), logvar.data[0].copy()


def reparameterize(mu: Tensor | np.ndarray, logvar: Tensor | np.ndarray,
                   rng: np.random.Generator):
    """Sample mu + exp(logvar / 2) * standard normal; logvar is clamped."""
    if isinstance(mu, Tensor):
        logvar = T.clip(logvar, LOGVAR_MIN, LOGVAR_MAX)
        noise = Tensor(rng.standard_normal(mu.shape), dtype=mu.data.dtype)
        return mu + (logvar * 0.5).exp() * noise
    logvar = np.clip(np.asarray(logvar, dtype=np.float64), LOGVAR_MIN, LOGVAR_MAX)
    return np.asarray(mu) + np.exp(logvar / 2.0) * rng.standard_normal(np.shape(mu))


def decode_batch(params: dict[str, Tensor], latents) -> tuple[Tensor, Tensor]:
    """Duration estimates (B,) and type logits (B, K) from latents (B, d)."""
    z = latents if isinstance(latents, Tensor) else Tensor(latents)
    h = _mlp(params, "dec", z)
    tau_hat = (h @ params["dec.tau.w"] + params["dec.tau.b"])[:, 0]
    logits = h @ params["dec.logits.w"] + params["dec.logits.b"]
    return tau_hat, logits


def decode(params: dict[str, Tensor], cfg: VaeConfig, latent: np.ndarray
           ) -> tuple[float, np.ndarray]:
    """One latent -> (standardized duration estimate, type logits).

    The predicted type is argmax(logits); ties break toward the lowest
    index (numpy argmax convention).
    """
    if np.shape(latent) != (cfg.d_latent,):
        raise ValueError(f"latent must have shape ({cfg.d_latent},)")
    with T.no_grad():
        tau_hat, logits = decode_batch(params, np.asarray(latent)[None, :])
    return float(tau_hat.data[0]), logits.data[0].copy()


def kl_term(mu: Tensor, logvar: Tensor) -> Tensor:
    """Closed-form KL(N(mu, diag exp(logvar)) || N(0, I)) per row, shape (B,)."""
    return ((mu * mu + logvar.exp() - logvar - 1.0) * 0.5).sum(axis=-1)


def vae_loss(taus: np.ndarray, types: np.ndarray, tau_hat: Tensor, logits: Tensor,
             mu: Tensor, logvar: Tensor, beta: float) -> Tensor:
    """Mean over the batch of squared duration error + type cross-entropy
    + beta * KL."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    tau_true = Tensor(np.asarray(taus, dtype=np.float64), dtype=tau_hat.data.dtype)
    sq = (tau_true - tau_hat) * (tau_true - tau_hat)
    k = logits.shape[-1]
    onehot = np.eye(k, dtype=logits.data.dtype)[np.asarray(types, dtype=np.int64)]
    ce = -(T.log_softmax(logits) * Tensor(onehot, dtype=logits.data.dtype)).sum(axis=-1)
    return (sq + ce + kl_term(mu, logvar) * beta).mean()


def beta_schedule(step: int, total_steps: int, beta_min: float, beta_max: float) -> float:
    """Linear ramp over the first half of training, then constant at beta_max."""
    if not 0 <= step <= total_steps:
        raise ValueError("step outside [0, total_steps]")
    if not 0 < beta_min <= beta_max:
        raise ValueError("need 0 < beta_min <= beta_max")
    half = total_steps / 2.0
    if step >= half:
        return beta_max
    return beta_min + (beta_max - beta_min) * (step / half)


def train_vae(dataset: Dataset, cfg: VaeConfig, train_cfg: VaeTrainConfig,
              rng: np.random.Generator | None = None) -> dict[str, Tensor]:
    """Fit the autoencoder on all events of a standardized dataset with Adam."""
    if rng is None:
        rng = np.random.default_rng(train_cfg.seed)
    taus, types = dataset.all_events()
    params = init_vae_params(cfg, rng)
    opt = Adam(params, lr=train_cfg.lr)
    m = taus.size
    for step in range(train_cfg.steps):
        idx = rng.integers(0, m, size=min(train_cfg.batch_size, m))
        beta = beta_schedule(step, train_cfg.steps, train_cfg.beta_min, train_cfg.beta_max)
        mu, logvar = encode_batch(params, taus[idx], types[idx], cfg.num_types)
        z = reparameterize(mu, logvar, rng)
        tau_hat, logits = decode_batch(params, z)
        loss = vae_loss(taus[idx], types[idx], tau_hat, logits, mu, logvar, beta)
        if not np.isfinite(loss.data):
            raise TrainingDivergedError(f"autoencoder loss diverged at step {step}")
        opt.step(T.grad(loss))
    return params


def mean_loss(params: dict[str, Tensor], cfg: VaeConfig, taus: np.ndarray,
              types: np.ndarray, beta: float) -> float:
    """Deterministic (posterior-mean) loss over a set of events."""
    with T.no_grad():
        mu, logvar = encode_batch(params, taus, types, cfg.num_types)
        tau_hat, logits = decode_batch(params, mu)
        loss = vae_loss(taus, types, tau_hat, logits, mu, logvar, beta)
    return float(loss.data)


def encode_dataset(params: dict[str, Tensor], cfg: VaeConfig,
                   dataset: Dataset) -> list[LatentSequence]:
    """Encode every sequence to padded posterior means; padded rows are zero."""
    out = []
    with T.no_grad():
        for seq in dataset.sequences:
            events, mask = pad_and_mask(seq, dataset.max_len)
            n = len(seq)
            mu, _ = encode_batch(params, np.array([e.tau for e in events[:n]]),
                                 np.array([e.k for e in events[:n]]), cfg.num_types)
            latents = np.zeros((dataset.max_len, cfg.d_latent), dtype=mu.data.dtype)
            latents[:n] = mu.data
            out.append(LatentSequence(latents, mask))
    return out


def reconstruction_metrics(params: dict[str, Tensor], cfg: VaeConfig,
                           taus: np.ndarray, types: np.ndarray) -> tuple[float, float]:
    """(type accuracy, standardized-duration MSE) of the posterior-mean round trip."""
    with T.no_grad():
        mu, _ = encode_batch(params, taus, types, cfg.num_types)
        tau_hat, logits = decode_batch(params, mu)
    pred_types = np.argmax(logits.data, axis=-1)
    acc = float(np.mean(pred_types == np.asarray(types)))
    mse = float(np.mean((tau_hat.data - np.asarray(taus)) ** 2))
    return acc, mse


def params_checksum(params: dict[str, Tensor]) -> str:
    """Order-independent digest of all parameter buffers."""
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()
