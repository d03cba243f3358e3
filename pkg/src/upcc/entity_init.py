"""Entity representation matrices from pooled historical-review encodings.

Each training review is encoded once; its document vector is the mean of the
content-token states (special tokens excluded from both the sum and the
denominator). A user's (product's) initial row is the mean of its documents'
vectors. The finished matrix is rescaled so its Frobenius norm matches that
of a same-shape standard-normal reference matrix -- either the expected norm
sqrt(rows * cols) in closed form (default) or the norm of an actually sampled
reference. Scaling preserves row directions, so nearest-row lookups are
unchanged.

Entities with no usable training reviews ("cold": dev/test-only, or all-empty
documents) receive the mean of the computed rows, assigned before scaling.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .corpus import Corpus
from .encoder import TransformerEncoder
from .tokenizer import PAD_ID, Vocab, encode


class EmptyDocumentError(Exception):
    pass


class ColdEntityError(Exception):
    pass


class CacheFormatError(Exception):
    pass


class DegenerateNormError(Exception):
    pass


SCALE_MODES = ("closed_form", "sampled")


@dataclass
class EmbeddingMatrix:
    entity_ids: list[str]
    matrix: np.ndarray       # (rows, hidden) float32, already scaled
    scale_factor: float
    mode: str                # closed_form | sampled
    seed: int
    encoder_hash: bytes      # 32-byte digest of the producing encoder
    split: str = "train"     # historical pool; caches are always train-built

    @property
    def raw_matrix(self) -> np.ndarray:
        """Pre-scaling matrix (matrix / scale_factor)."""
        return self.matrix / np.float32(self.scale_factor)

    def with_scale(self, factor: float) -> "EmbeddingMatrix":
        """Same initialization rescaled by an explicit factor."""
        if factor <= 0:
            raise ValueError(f"scale factor must be positive, got {factor}")
        scaled = (self.matrix.astype(np.float64) / self.scale_factor * factor)
        return EmbeddingMatrix(list(self.entity_ids), scaled.astype(np.float32),
                               float(factor), self.mode, self.seed,
                               self.encoder_hash, self.split)

    def row_of(self, entity_id: str) -> np.ndarray:
        return self.matrix[self.entity_ids.index(entity_id)]


def doc_vector(token_states: np.ndarray, content_flags: np.ndarray) -> np.ndarray:
    """Mean of the content-token rows (sum over flagged rows divided by count)."""
    token_states = np.asarray(token_states)
    flags = np.asarray(content_flags, dtype=bool)
    count = int(flags.sum())
    if count == 0:
        raise EmptyDocumentError("document has no content tokens")
    return token_states[flags].sum(axis=0) / count


def entity_vector(doc_vectors: np.ndarray) -> np.ndarray:
    """Arithmetic mean over an entity's document vectors (n >= 1)."""
    doc_vectors = np.asarray(doc_vectors)
    if doc_vectors.ndim != 2 or doc_vectors.shape[0] == 0:
        raise ColdEntityError("entity has no document vectors")
    return doc_vectors.mean(axis=0)


def frobenius_scale(matrix: np.ndarray, mode: str = "closed_form",
                    seed: int = 0) -> tuple[np.ndarray, float]:
    """Rescale so the Frobenius norm matches a standard-normal reference.

    closed_form uses the expected squared norm rows*cols of the reference;
    sampled draws the reference with the seeded generator and matches its
    realized norm exactly.
    """
    if mode not in SCALE_MODES:
        raise ValueError(f"unknown scale mode {mode!r}")
    matrix = np.asarray(matrix)
    norm = float(np.linalg.norm(matrix))
    if norm == 0.0 or not np.isfinite(norm):
        raise DegenerateNormError(f"matrix Frobenius norm is {norm}")
    if mode == "closed_form":
        target = float(np.sqrt(matrix.size))
    else:
        ref = np.random.default_rng(seed).standard_normal(matrix.shape)
        target = float(np.linalg.norm(ref))
    factor = target / norm
    return matrix * factor, factor


def _doc_vectors_for_split(corpus: Corpus, encoder: TransformerEncoder, vocab: Vocab,
                           max_len: int, batch_size: int) -> tuple[list[str], np.ndarray, list[bool]]:
    """Encode train reviews in review_id order; returns (ids, vectors, usable)."""
    reviews = sorted(corpus.train, key=lambda r: r.review_id)
    docs = [encode(r.text, vocab, max_len) for r in reviews]
    vectors = np.zeros((len(reviews), encoder.cfg.hidden_size), dtype=np.float64)
    usable = [d.n_content > 0 for d in docs]
    encoder.eval()
    with torch.no_grad():
        for start in range(0, len(reviews), batch_size):
            chunk = docs[start:start + batch_size]
            ids = torch.from_numpy(np.stack([d.ids for d in chunk]))
            states = encoder(ids, ids == PAD_ID).double().numpy()
            for i, d in enumerate(chunk):
                if d.n_content > 0:
                    vectors[start + i] = doc_vector(states[i], d.content_flags)
    return [r.review_id for r in reviews], vectors, usable


def precompute(corpus: Corpus, encoder: TransformerEncoder, vocab: Vocab,
               max_len: int, batch_size: int = 64, mode: str = "closed_form",
               seed: int = 0, encoder_hash: bytes = b"\x00" * 32,
               ) -> tuple[EmbeddingMatrix, EmbeddingMatrix]:
    """Build the (user, product) matrices from the frozen encoder.

    Each review is encoded once and its document vector reused for both its
    user and its product. Reduction order is fixed by review_id, so results
    are bit-identical across runs with the same encoder weights.
    """
    review_ids, vectors, usable = _doc_vectors_for_split(
        corpus, encoder, vocab, max_len, batch_size)
    by_id = {rid: i for i, rid in enumerate(review_ids)}
    train_sorted = sorted(corpus.train, key=lambda r: r.review_id)

    matrices = []
    for id_list, key in ((corpus.user_ids(), "user_id"),
                         (corpus.product_ids(), "product_id")):
        index = {e: j for j, e in enumerate(id_list)}
        sums = np.zeros((len(id_list), encoder.cfg.hidden_size), dtype=np.float64)
        counts = np.zeros(len(id_list), dtype=np.int64)
        for r in train_sorted:
            i = by_id[r.review_id]
            if not usable[i]:
                continue  # empty documents contribute nothing
            j = index[getattr(r, key)]
            sums[j] += vectors[i]
            counts[j] += 1
        if not counts.any():
            raise ColdEntityError("no entity has a usable training review")
        warm = counts > 0
        rows = np.zeros_like(sums)
        rows[warm] = sums[warm] / counts[warm, None]
        rows[~warm] = rows[warm].mean(axis=0)
        scaled, factor = frobenius_scale(rows, mode=mode, seed=seed)
        matrices.append(EmbeddingMatrix(list(id_list), scaled.astype(np.float32),
                                        float(factor), mode, seed, encoder_hash))
    return matrices[0], matrices[1]


# ---------------------------------------------------------------------------
# cache serialization
# ---------------------------------------------------------------------------

CACHE_MAGIC = b"UPCCEMB1"
_MODE_CODES = {"closed_form": 0, "sampled": 1}
_CODE_MODES = {v: k for k, v in _MODE_CODES.items()}


def ids_path(path: str | Path) -> Path:
    return Path(str(path) + ".ids")


def save_cache(emb: EmbeddingMatrix, path: str | Path) -> None:
    """Binary layout: magic, u32 rows, u32 cols, f64 scale, u8 mode, u64 seed,
    32-byte encoder hash, float32 row-major matrix; ids in a companion text
    file, one per line in row order."""
    path = Path(path)
    rows, cols = emb.matrix.shape
    if len(emb.encoder_hash) != 32:
        raise CacheFormatError("encoder hash must be 32 bytes")
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<IIdBQ", rows, cols, emb.scale_factor,
                             _MODE_CODES[emb.mode], emb.seed))
        fh.write(emb.encoder_hash)
        fh.write(np.ascontiguousarray(emb.matrix, dtype="<f4").tobytes())
    with open(ids_path(path), "w", encoding="utf-8") as fh:
        for e in emb.entity_ids:
            fh.write(e + "\n")


def load_cache(path: str | Path) -> EmbeddingMatrix:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:8] != CACHE_MAGIC:
        raise CacheFormatError(f"{path}: bad magic {blob[:8]!r}")
    header = struct.calcsize("<IIdBQ")
    if len(blob) < 8 + header + 32:
        raise CacheFormatError(f"{path}: truncated header")
    rows, cols, factor, mode_code, seed = struct.unpack_from("<IIdBQ", blob, 8)
    if mode_code not in _CODE_MODES:
        raise CacheFormatError(f"{path}: unknown mode code {mode_code}")
    off = 8 + header
    digest = blob[off:off + 32]
    off += 32
    nbytes = rows * cols * 4
    data = blob[off:off + nbytes]
    if len(data) != nbytes:
        raise CacheFormatError(f"{path}: truncated matrix data")
    matrix = np.frombuffer(data, dtype="<f4").reshape(rows, cols).copy()
    with open(ids_path(path), "r", encoding="utf-8") as fh:
        ids = [line.rstrip("\n") for line in fh]
    ids = [i for i in ids if i]
    if len(ids) != rows:
        raise CacheFormatError(f"{path}: {len(ids)} ids for {rows} rows")
    return EmbeddingMatrix(ids, matrix, float(factor), _CODE_MODES[mode_code],
                           int(seed), digest)


def is_stale(emb: EmbeddingMatrix, encoder_hash: bytes) -> bool:
    """True when the cache was built by a different encoder than given."""
    return emb.encoder_hash != encoder_hash
