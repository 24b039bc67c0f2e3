"""Conditional flow-matching training of the denoiser, plus checkpoints.

The regression target is (x0 - eps); the loss weights each row by the
squared schedule derivative, which is the diagonal analogue of applying
A'(s) to the residual. One flow time is drawn per sequence, so
per-position asynchrony comes entirely from the schedule, not from the
time draw. Padded rows are excluded from both the loss and the attention
keys.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .dit import DitConfig, dit_forward, init_dit_params
from .optim import Adam, TrainingDivergedError
from .schedule import NoiseSchedule
from .tensor import Tensor
from .vae import LatentSequence, params_checksum

__all__ = [
    "TrainConfig",
    "TrainResult",
    "cfm_loss",
    "rectified_flow_loss",
    "train_dm",
    "Checkpoint",
    "CheckpointError",
    "make_checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "params_from_checkpoint",
]

CHECKPOINT_MAGIC = b"ADIF"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    total_steps: int = 20_000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    seed: int = 0
    schedule_kind: str = "async"
    mask_loss: bool = True
    dtype: str = "f32"

    def __post_init__(self):
        if self.batch_size < 1 or self.total_steps < 1:
            raise ValueError("batch_size and total_steps must be at least 1")


def _draw_s_eps(rng: np.random.Generator, batch: int, n: int, d: int
                ) -> tuple[np.ndarray, np.ndarray]:
    # one flow time per sequence, in (0, 1]; then the noise draws
    s = 1.0 - rng.random(batch)
    eps = rng.standard_normal((batch, n, d))
    return s, eps


def cfm_loss(params: dict[str, Tensor], x0_batch: np.ndarray, masks: np.ndarray,
             schedule: NoiseSchedule, rng: np.random.Generator, cfg: DitConfig,
             s: np.ndarray | None = None, eps: np.ndarray | None = None) -> Tensor:
    """Flow-matching objective averaged over unmasked rows of the batch.

    Per sequence b with flow time s_b: rows are interpolated between data
    and noise, the denoiser is evaluated with the validity mask as key
    mask, and the row loss is a'_i(s_b)^2 * ||(x0_i - eps_i) - v_i||^2.
    Pass ``s``/``eps`` to pin the draws (verification hooks); otherwise
    they come from ``rng`` in the order (all s, then all eps).
    """
    x0_batch = np.asarray(x0_batch)
    masks = np.asarray(masks, dtype=np.float64)
    b, n, d = x0_batch.shape
    if n != schedule.n:
        raise ValueError(f"batch length {n} does not match schedule N={schedule.n}")
    if s is None or eps is None:
        s_drawn, eps_drawn = _draw_s_eps(rng, b, n, d)
        s = s_drawn if s is None else np.asarray(s, dtype=np.float64)
        eps = eps_drawn if eps is None else np.asarray(eps)

    dtype = x0_batch.dtype
    a = np.stack([schedule.a_diag(float(sb)) for sb in s]).astype(dtype)          # (B, N)
    ap = np.stack([schedule.a_prime_diag(float(sb)) for sb in s])                 # (B, N)
    eps = eps.astype(dtype, copy=False)
    x_s = a[:, :, None] * x0_batch + (1.0 - a)[:, :, None] * eps

    v = dit_forward(params, x_s, a, masks > 0, cfg)
    target = Tensor((x0_batch - eps).astype(dtype, copy=False), dtype=dtype)
    resid = target - v
    row_sq = (resid * resid).sum(axis=-1)                                          # (B, N)
    weights = (ap * ap) * masks                                                    # (B, N)
    total = (row_sq * Tensor(weights.astype(dtype), dtype=dtype)).sum()
    loss = total / float(masks.sum())
    if not np.isfinite(loss.data):
        rows = (row_sq.data * weights).sum(axis=-1)
        bad = int(np.argmax(~np.isfinite(rows)))
        raise TrainingDivergedError(
            f"non-finite flow-matching loss (batch index {bad}, s={float(s[bad]):.6f})")
    return loss


def rectified_flow_loss(params: dict[str, Tensor], x0_batch: np.ndarray,
                        masks: np.ndarray, s: np.ndarray, eps: np.ndarray,
                        cfg: DitConfig) -> Tensor:
    """Independent straight-line flow-matching loss (reference path).

    Interpolates x_s = (1-s) x0 + s eps directly and regresses
    (x0 - eps) with unit row weights; used to pin down the synchronous
    special case of :func:`cfm_loss`.
    """
    x0_batch = np.asarray(x0_batch)
    masks = np.asarray(masks, dtype=np.float64)
    dtype = x0_batch.dtype
    alpha = (1.0 - np.asarray(s, dtype=np.float64))[:, None].astype(dtype)
    gamma = np.asarray(s, dtype=np.float64)[:, None].astype(dtype)
    eps = eps.astype(dtype, copy=False)
    x_s = alpha[:, :, None] * x0_batch + gamma[:, :, None] * eps
    a = np.broadcast_to(alpha, x0_batch.shape[:2])
    v = dit_forward(params, x_s, a, masks > 0, cfg)
    resid = Tensor((x0_batch - eps).astype(dtype, copy=False), dtype=dtype) - v
    row_sq = (resid * resid).sum(axis=-1)
    total = (row_sq * Tensor(masks.astype(dtype), dtype=dtype)).sum()
    return total / float(masks.sum())


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    losses: list[float] = field(default_factory=list)


def train_dm(latent_seqs: list[LatentSequence], dit_cfg: DitConfig,
             train_cfg: TrainConfig, rng: np.random.Generator | None = None,
             vae_params: dict[str, Tensor] | None = None,
             checkpoint_path: str | None = None,
             checkpoint_every: int = 1000,
             config_echo: dict | None = None) -> TrainResult:
    """Adam optimization of the flow-matching loss over encoded sequences.

    The (frozen) autoencoder weights, when given, are checksummed before
    and after to guarantee they were not touched. On divergence the last
    finite checkpoint is kept on disk (when a path is given) and a
    TrainingDivergedError is raised.
    """
    if rng is None:
        rng = np.random.default_rng(train_cfg.seed)
    vae_sum = params_checksum(vae_params) if vae_params is not None else None
    schedule = NoiseSchedule(train_cfg.schedule_kind, dit_cfg.n_max)
    params = init_dit_params(dit_cfg, rng)
    opt = Adam(params, lr=train_cfg.lr, beta1=train_cfg.beta1, beta2=train_cfg.beta2,
               eps_hat=train_cfg.eps_hat)
    x_all = np.stack([ls.latents for ls in latent_seqs])
    m_all = np.stack([ls.mask for ls in latent_seqs])
    num = x_all.shape[0]
    losses: list[float] = []
    for step in range(train_cfg.total_steps):
        idx = rng.integers(0, num, size=train_cfg.batch_size)
        # on divergence cfm_loss raises; the last periodic save stays on disk
        loss = cfm_loss(params, x_all[idx], m_all[idx], schedule, rng, dit_cfg)
        losses.append(float(loss.data))
        opt.step(T.grad(loss))
        if checkpoint_path and (step + 1) % checkpoint_every == 0:
            save_checkpoint(checkpoint_path,
                            make_checkpoint(params, config_echo or {}))
    if vae_params is not None and params_checksum(vae_params) != vae_sum:
        raise RuntimeError("frozen autoencoder parameters were mutated during training")
    if checkpoint_path:
        save_checkpoint(checkpoint_path, make_checkpoint(params, config_echo or {}))
    return TrainResult(params, losses)


# ---------------------------------------------------------------------------
# Checkpoints: magic 'ADIF', little-endian u32 version, u32 array count,
# per array {u32 name length, name, u32 rank, u64 dims..., u8 dtype code,
# raw little-endian payload}, then u32-length-prefixed JSON config echo.
# ---------------------------------------------------------------------------

class CheckpointError(RuntimeError):
    """Unreadable, truncated or incompatible checkpoint file."""


@dataclass
class Checkpoint:
    version: int
    arrays: dict[str, np.ndarray]
    config: dict


def make_checkpoint(params: dict[str, Tensor], config: dict) -> Checkpoint:
    return Checkpoint(CHECKPOINT_VERSION,
                      {name: params[name].data for name in sorted(params)},
                      config)


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", ckpt.version),
              struct.pack("<I", len(ckpt.arrays))]
    for name, arr in ckpt.arrays.items():
        code = _CODE_FOR_DTYPE.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"array {name!r} has unsupported dtype {arr.dtype}")
        name_b = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        chunks.append(struct.pack("<B", code))
        chunks.append(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"),
                                                       copy=False).tobytes())
    cfg_b = json.dumps(ckpt.config).encode("utf-8")
    chunks.append(struct.pack("<I", len(cfg_b)))
    chunks.append(cfg_b)
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic bytes)")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {version} unsupported "
            f"(this build reads version {CHECKPOINT_VERSION})")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank)) if rank else ()
        code = struct.unpack("<B", r.take(1))[0]
        dtype = _DTYPE_CODES.get(code)
        if dtype is None:
            raise CheckpointError(f"{path}: unknown dtype code {code}")
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(r.take(count * dtype.itemsize), dtype=dtype).reshape(dims)
        arrays[name] = arr.copy()
    config = json.loads(r.take(r.u32()).decode("utf-8"))
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes after config echo")
    return Checkpoint(version, arrays, config)


def params_from_checkpoint(ckpt: Checkpoint, requires_grad: bool = False
                           ) -> dict[str, Tensor]:
    return {name: Tensor(arr, requires_grad=requires_grad, dtype=arr.dtype)
            for name, arr in ckpt.arrays.items()}
