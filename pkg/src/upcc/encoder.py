"""Small trainable transformer encoder and the shared attention primitive.

The encoder maps a padded id sequence to per-token states; position 0 (the
CLS slot) doubles as the document summary. Blocks are post-layer-norm with
GELU feed-forward, PAD keys are masked out of self-attention, and dropout is
active only in train mode, so eval outputs are bitwise reproducible.

``MultiHeadAttention`` is also used by the cross-context model. Masks are
boolean with True meaning "blocked"; a row whose keys are all blocked yields
an exactly-zero output row (and zero attention weights) instead of NaN --
needed when self-exclusion masks away the only available key.

``finite_diff_check`` verifies analytic gradients against central finite
differences and is the gradient oracle for every trainable block.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .tokenizer import PAD_ID, TokenizedDoc


class EncoderError(Exception):
    pass


class CheckpointFormatError(Exception):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    hidden_size: int = 64
    layers: int = 2
    heads: int = 4
    ffn_dim: int = 256
    max_len: int = 32
    vocab_size: int = 0
    dropout_rate: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.hidden_size % self.heads != 0:
            raise EncoderError(
                f"hidden_size {self.hidden_size} not divisible by heads {self.heads}")
        if min(self.hidden_size, self.layers, self.heads, self.ffn_dim,
               self.max_len, self.vocab_size) < 1:
            raise EncoderError("all dimensions must be >= 1")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise EncoderError(f"dropout_rate {self.dropout_rate} outside [0, 1)")


@dataclass(frozen=True)
class EncoderOutput:
    token_states: torch.Tensor  # (max_len, hidden)

    @property
    def cls_state(self) -> torch.Tensor:
        return self.token_states[0]


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with per-head projections.

    query: (B, q, h) or (q, h); key/value: (B, k, h) or (k, h).
    key_mask: bool, broadcastable to (B, q, k), True = blocked.
    """

    def __init__(self, hidden_size: int, num_heads: int):
        super().__init__()
        if hidden_size % num_heads != 0:
            raise EncoderError(f"hidden {hidden_size} not divisible by {num_heads} heads")
        self.hidden_size = hidden_size
        self.num_heads = num_heads
        self.head_dim = hidden_size // num_heads
        self.q_proj = nn.Linear(hidden_size, hidden_size)
        self.k_proj = nn.Linear(hidden_size, hidden_size)
        self.v_proj = nn.Linear(hidden_size, hidden_size)
        self.out_proj = nn.Linear(hidden_size, hidden_size)

    def forward(self, query: torch.Tensor, key: torch.Tensor, value: torch.Tensor,
                key_mask: torch.Tensor | None = None, return_weights: bool = False):
        """Key/value may be 2-D even for batched queries; shared keys are then
        projected once and broadcast across the batch."""
        squeeze = query.dim() == 2
        if squeeze:
            query = query[None]
            if key_mask is not None and key_mask.dim() == 2:
                key_mask = key_mask[None]
        if not (torch.isfinite(query).all() and torch.isfinite(key).all()
                and torch.isfinite(value).all()):
            raise EncoderError("non-finite attention inputs")
        if key.dim() == 2:
            key, value = key[None], value[None]
        b, q_len, _ = query.shape
        k_len = key.shape[1]
        h, d = self.num_heads, self.head_dim

        def split(x: torch.Tensor) -> torch.Tensor:
            return x.view(x.shape[0], x.shape[1], h, d).transpose(1, 2)

        qh = split(self.q_proj(query))          # (B, heads, q, d)
        kh = split(self.k_proj(key))            # (B or 1, heads, k, d)
        vh = split(self.v_proj(value))
        scores = qh @ kh.transpose(-1, -2) / (d ** 0.5)  # (B, heads, q, k)

        blocked_rows = None
        if key_mask is not None:
            mask = key_mask.to(torch.bool).expand(b, q_len, k_len)[:, None]
            scores = scores.masked_fill(mask, torch.finfo(scores.dtype).min / 2)
            blocked_rows = mask.all(dim=-1)  # (B, 1, q) broadcast over heads
        weights = torch.softmax(scores, dim=-1)
        if blocked_rows is not None:
            weights = weights.masked_fill(blocked_rows[..., None], 0.0)
        context = (weights @ vh).transpose(1, 2).reshape(b, q_len, self.hidden_size)
        out = self.out_proj(context)
        if blocked_rows is not None:
            out = out.masked_fill(blocked_rows[:, 0, :, None], 0.0)
        if squeeze:
            out = out[0]
            weights = weights[0]
        return (out, weights) if return_weights else out


class EncoderBlock(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.attn = MultiHeadAttention(cfg.hidden_size, cfg.heads)
        self.norm1 = nn.LayerNorm(cfg.hidden_size)
        self.ffn = nn.Sequential(
            nn.Linear(cfg.hidden_size, cfg.ffn_dim),
            nn.GELU(),
            nn.Linear(cfg.ffn_dim, cfg.hidden_size),
        )
        self.norm2 = nn.LayerNorm(cfg.hidden_size)
        self.dropout = nn.Dropout(cfg.dropout_rate)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        x = self.norm1(x + self.dropout(self.attn(x, x, x, key_mask)))
        x = self.norm2(x + self.dropout(self.ffn(x)))
        return x


class TransformerEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.token_emb = nn.Embedding(cfg.vocab_size, cfg.hidden_size)
        self.pos_emb = nn.Embedding(cfg.max_len, cfg.hidden_size)
        self.dropout = nn.Dropout(cfg.dropout_rate)
        self.blocks = nn.ModuleList(EncoderBlock(cfg) for _ in range(cfg.layers))

    def forward(self, ids: torch.Tensor, pad_mask: torch.Tensor | None = None) -> torch.Tensor:
        """ids: (B, L) int64; pad_mask: (B, L) bool, True at PAD. Returns (B, L, h)."""
        if ids.max().item() >= self.cfg.vocab_size:
            raise EncoderError(
                f"token id {int(ids.max())} outside vocab of size {self.cfg.vocab_size}")
        if pad_mask is None:
            pad_mask = ids == PAD_ID
        positions = torch.arange(ids.shape[1], device=ids.device)
        x = self.token_emb(ids) + self.pos_emb(positions)[None]
        x = self.dropout(x)
        key_mask = pad_mask[:, None, :]  # broadcast over query positions
        for block in self.blocks:
            x = block(x, key_mask)
        return x


def init_weights(model: nn.Module, std: float = 0.02) -> None:
    """normal(0, std) for projections/embeddings, zero biases, unit LN gains.

    Consumes the global torch RNG; call torch.manual_seed first for
    reproducible initialization.
    """
    for module in model.modules():
        if isinstance(module, nn.Linear):
            nn.init.normal_(module.weight, 0.0, std)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Embedding):
            nn.init.normal_(module.weight, 0.0, std)
        elif isinstance(module, nn.LayerNorm):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)


def encode_doc(encoder: TransformerEncoder, doc: TokenizedDoc) -> EncoderOutput:
    """Single-document forward in the encoder's current mode."""
    ids = torch.from_numpy(np.asarray(doc.ids))[None]
    pad = torch.from_numpy(np.asarray(doc.ids) == PAD_ID)[None]
    states = encoder(ids, pad)[0]
    return EncoderOutput(token_states=states)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def finite_diff_check(loss_fn: Callable[[], torch.Tensor],
                      params: Iterable[tuple[str, torch.Tensor]],
                      eps: float = 1e-5,
                      max_coords_per_block: int = 64,
                      seed: int = 0) -> dict[str, float]:
    """Max relative error between analytic and central-difference gradients.

    Checks every coordinate of blocks up to max_coords_per_block entries and
    a seeded random subset of larger ones. Run in float64 with dropout off;
    returns {block name: max relative error} plus an "__overall__" entry.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    params = list(params)
    for _, p in params:
        p.grad = None
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise EncoderError("non-finite loss in gradient check")
    loss.backward()
    rng = np.random.default_rng(seed)
    report: dict[str, float] = {}
    worst = 0.0
    for name, p in params:
        if p.grad is None:
            raise EncoderError(f"parameter {name} received no gradient")
        analytic = p.grad.detach().reshape(-1).clone()
        n = analytic.numel()
        coords = (np.arange(n) if n <= max_coords_per_block
                  else rng.choice(n, size=max_coords_per_block, replace=False))
        flat = p.data.reshape(-1)
        block_worst = 0.0
        with torch.no_grad():
            for c in coords:
                orig = flat[c].item()
                flat[c] = orig + eps
                hi = loss_fn().item()
                flat[c] = orig - eps
                lo = loss_fn().item()
                flat[c] = orig
                numeric = (hi - lo) / (2 * eps)
                a = analytic[c].item()
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                block_worst = max(block_worst, rel)
        report[name] = block_worst
        worst = max(worst, block_worst)
    report["__overall__"] = worst
    return report


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"UPCCCKPT"
CKPT_VERSION = 1


def state_to_arrays(state: dict[str, torch.Tensor]) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in state.items()}


def save_checkpoint(path: str | Path, state: dict[str, torch.Tensor | np.ndarray],
                    sidecar: dict) -> None:
    """Binary weight records plus a JSON sidecar at <path>.json.

    Record layout: u32 name length, UTF-8 name, u32 rows, u32 cols, float32
    row-major data. 1-D tensors are stored as a single row.
    """
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        for name, tensor in state.items():
            arr = np.asarray(tensor.detach().cpu().numpy()
                             if isinstance(tensor, torch.Tensor) else tensor,
                             dtype=np.float32)
            if arr.ndim == 0:
                arr = arr.reshape(1, 1)
            elif arr.ndim == 1:
                arr = arr.reshape(1, -1)
            elif arr.ndim != 2:
                raise CheckpointFormatError(f"{name}: rank {arr.ndim} not storable")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
            fh.write(arr.astype("<f4").tobytes(order="C"))
    with open(path.with_suffix(path.suffix + ".json"), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:8] != CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {blob[:8]!r}")
    if len(blob) < 12:
        raise CheckpointFormatError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    state: dict[str, np.ndarray] = {}
    off = 12
    while off < len(blob):
        try:
            (name_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + name_len].decode("utf-8")
            if len(blob[off:off + name_len]) != name_len:
                raise struct.error("short name")
            off += name_len
            rows, cols = struct.unpack_from("<II", blob, off)
            off += 8
            nbytes = rows * cols * 4
            data = blob[off:off + nbytes]
            if len(data) != nbytes:
                raise struct.error("short data")
            off += nbytes
        except struct.error as exc:
            raise CheckpointFormatError(f"{path}: truncated record ({exc})") from None
        state[name] = np.frombuffer(data, dtype="<f4").reshape(rows, cols).copy()
    sidecar_path = path.with_suffix(path.suffix + ".json")
    sidecar = json.loads(sidecar_path.read_text(encoding="utf-8")) if sidecar_path.exists() else {}
    return state, sidecar


def checkpoint_hash(path: str | Path) -> bytes:
    """SHA-256 of the binary weight file; identifies the producing encoder."""
    return hashlib.sha256(Path(path).read_bytes()).digest()


def state_hash(state: dict[str, torch.Tensor | np.ndarray]) -> bytes:
    """Deterministic SHA-256 over named float32 weights, without touching disk."""
    digest = hashlib.sha256()
    for name in state:
        arr = state[name]
        arr = arr.detach().cpu().numpy() if isinstance(arr, torch.Tensor) else np.asarray(arr)
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return digest.digest()


def encoder_config_sidecar(cfg: EncoderConfig) -> dict:
    return {"encoder": asdict(cfg)}
