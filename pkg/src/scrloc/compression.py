"""Product quantization of token sets.

A ``D``-dimensional token is cut into ``N = D / B`` blocks of ``B`` floats; each block is
replaced by the byte index of its nearest entry in a 256-row table learned with k-means.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CodebookMismatchError, DimensionMismatchError, FormatError, InvalidParameterError, TooFewSamplesError

log = logging.getLogger(__name__)

CODEBOOK_SIZE = 256
_CB_MAGIC = b"SCRQ"
_CODES_MAGIC = b"SCRC"
_VERSION = 1
STORAGE_BLOCK_SIZES = (2, 4, 6, 8, 16, 32, 64, 128)


@dataclass(frozen=True, eq=False)
class TokenSet:
    tokens: np.ndarray  # (T, D) float32
    image_id: str = ""

    def __post_init__(self):
        tok = np.asarray(self.tokens, dtype=np.float32)
        if tok.ndim != 2:
            raise DimensionMismatchError("tokens must be a (T, D) matrix")
        object.__setattr__(self, "tokens", tok)

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


@dataclass(frozen=True, eq=False)
class Codebook:
    block_size: int
    entries: np.ndarray  # (N, 256, B) float32
    training_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        e = np.ascontiguousarray(self.entries, dtype=np.float32)
        if e.ndim != 3 or e.shape[1] != CODEBOOK_SIZE or e.shape[2] != self.block_size:
            raise DimensionMismatchError(f"entries must be (N, {CODEBOOK_SIZE}, {self.block_size})")
        e.setflags(write=False)
        object.__setattr__(self, "entries", e)

    @property
    def num_blocks(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.num_blocks * self.block_size

    def _body(self) -> bytes:
        head = struct.pack("<4sIIII", _CB_MAGIC, _VERSION, self.dim, self.block_size, self.num_blocks)
        return head + self.entries.astype("<f4").tobytes()

    @property
    def hash(self) -> bytes:
        return hashlib.sha256(self._body()).digest()

    def to_bytes(self) -> bytes:
        body = self._body()
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Codebook":
        if len(data) < 20 + 32:
            raise FormatError("codebook payload too short")
        body, digest = data[:-32], data[-32:]
        if hashlib.sha256(body).digest() != digest:
            raise FormatError("codebook checksum mismatch")
        magic, version, D, B, N = struct.unpack_from("<4sIIII", body)
        if magic != _CB_MAGIC or version != _VERSION:
            raise FormatError("not a codebook (bad magic or version)")
        if N * B != D or len(body) != 20 + N * CODEBOOK_SIZE * B * 4:
            raise FormatError("codebook header inconsistent with payload")
        entries = np.frombuffer(body, dtype="<f4", offset=20).reshape(N, CODEBOOK_SIZE, B)
        return cls(B, entries)


@dataclass(frozen=True, eq=False)
class QuantizedTokenSet:
    codes: np.ndarray  # (T, N) uint8
    codebook_hash: bytes
    image_id: str = ""

    def __post_init__(self):
        codes = np.asarray(self.codes)
        if codes.ndim != 2:
            raise DimensionMismatchError("codes must be a (T, N) matrix")
        object.__setattr__(self, "codes", np.ascontiguousarray(codes, dtype=np.uint8))
        if len(self.codebook_hash) != 32:
            raise InvalidParameterError("codebook hash must be a 32-byte SHA-256 digest")

    @property
    def nbytes(self) -> int:
        return self.codes.size

    def to_bytes(self) -> bytes:
        T, N = self.codes.shape
        return struct.pack("<4sIII", _CODES_MAGIC, _VERSION, T, N) + self.codebook_hash + self.codes.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, image_id: str = "") -> "QuantizedTokenSet":
        if len(data) < 48:
            raise FormatError("code payload too short")
        magic, version, T, N = struct.unpack_from("<4sIII", data)
        if magic != _CODES_MAGIC or version != _VERSION:
            raise FormatError("not a quantized token set (bad magic or version)")
        if len(data) != 48 + T * N:
            raise FormatError("code payload size does not match header")
        codes = np.frombuffer(data, dtype=np.uint8, offset=48).reshape(T, N)
        return cls(codes, bytes(data[16:48]), image_id)


# --------------------------------------------------------------------------------------------
# k-means
# --------------------------------------------------------------------------------------------


def _assign(x: np.ndarray, xsq: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest centroid index and squared distance per row (expanded-norm form)."""
    d = x @ c.T
    d *= -2.0
    d += np.sum(c * c, axis=1)[None, :]
    assign = np.argmin(d, axis=1)
    dmin = d[np.arange(len(x)), assign] + xsq
    return assign, np.maximum(dmin, 0.0)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++: each step draws a few D^2-weighted candidates and keeps the best."""
    M = x.shape[0]
    trials = 2 + int(np.log(k))
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(M)]
    sq = np.sum(x * x, axis=1)
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        cum = np.cumsum(d2)
        total = cum[-1]
        if total <= 0:
            centers[i] = x[rng.integers(M)]
            continue
        cand = np.minimum(np.searchsorted(cum, rng.random(trials) * total, side="right"), M - 1)
        cd = sq[cand, None] - 2.0 * (x[cand] @ x.T) + sq[None, :]
        np.maximum(cd, 0.0, out=cd)
        cd[np.arange(trials), cand] = 0.0
        np.minimum(cd, d2[None, :], out=cd)
        best = int(np.argmin(cd.sum(axis=1)))
        centers[i] = x[cand[best]]
        d2 = cd[best]
    return centers


def kmeans(x, k: int, rng: np.random.Generator, max_iter: int = 100, tol: float = 1e-6):
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are re-seeded on the points farthest from their centroid. Returns
    ``(centroids, mse_history)``; the history is the mean squared error after each assignment.
    """
    x = np.asarray(x, dtype=np.float64)
    centers = _kmeanspp(x, k, rng)
    xsq = np.sum(x * x, axis=1)
    history = []
    for _ in range(max_iter):
        assign, dmin = _assign(x, xsq, centers)
        history.append(float(dmin.mean()))
        counts = np.bincount(assign, minlength=k)
        sums = np.stack([np.bincount(assign, weights=x[:, b], minlength=k) for b in range(x.shape[1])], axis=1)
        new = centers.copy()
        nz = counts > 0
        new[nz] = sums[nz] / counts[nz, None]
        empty = np.nonzero(~nz)[0]
        if empty.size:
            far = np.argsort(-dmin, kind="stable")[: empty.size]
            new[empty] = x[far]
        shift = np.max(np.linalg.norm(new - centers, axis=1))
        centers = new
        if shift < tol:
            break
    return centers, history


def train_codebooks(
    samples, block_size: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6, n_init: int = 3
) -> Codebook:
    """Learn one 256-entry table per block position from ``samples`` (M, D).

    Each block runs ``n_init`` seeded k-means restarts and keeps the one with the lowest final error.
    """
    x = np.asarray(samples, dtype=np.float32)
    if x.ndim != 2:
        raise DimensionMismatchError("samples must be a (M, D) matrix")
    M, D = x.shape
    if block_size < 1 or D % block_size:
        raise DimensionMismatchError(f"dimension {D} is not divisible by block size {block_size}")
    if n_init < 1:
        raise InvalidParameterError("n_init must be positive")
    if M < CODEBOOK_SIZE:
        raise TooFewSamplesError(f"need at least {CODEBOOK_SIZE} samples, got {M}")
    N = D // block_size
    entries = np.empty((N, CODEBOOK_SIZE, block_size), dtype=np.float32)
    histories = []
    for j in range(N):
        block = x[:, j * block_size : (j + 1) * block_size]
        runs = [
            kmeans(block, CODEBOOK_SIZE, np.random.default_rng([seed, j, r]), max_iter=max_iter, tol=tol)
            for r in range(n_init)
        ]
        centers, hist = min(runs, key=lambda run: run[1][-1])
        entries[j] = centers.astype(np.float32)
        histories.append(hist)
    log.debug("trained %d codebooks on %d samples", N, M)
    meta = {
        "seed": seed,
        "samples": M,
        "n_init": n_init,
        "iterations": [len(h) for h in histories],
        "mse_history": histories,
    }
    return Codebook(block_size, entries, meta)


# --------------------------------------------------------------------------------------------
# Quantization
# --------------------------------------------------------------------------------------------


def _nearest(block: np.ndarray, table: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Exact nearest row of ``table`` for every row of ``block``; ties go to the lowest index."""
    out = np.empty(block.shape[0], dtype=np.uint8)
    tab = table.astype(np.float64)
    for i in range(0, block.shape[0], chunk):
        diff = block[i : i + chunk, None, :].astype(np.float64) - tab[None]
        out[i : i + chunk] = np.argmin(np.einsum("tkb,tkb->tk", diff, diff), axis=1)
    return out


def quantize(ts: TokenSet | np.ndarray, cb: Codebook) -> QuantizedTokenSet:
    if not isinstance(ts, TokenSet):
        ts = TokenSet(ts)
    if ts.dim != cb.dim:
        raise DimensionMismatchError(f"token dimension {ts.dim} does not match codebook dimension {cb.dim}")
    B = cb.block_size
    codes = np.empty((ts.tokens.shape[0], cb.num_blocks), dtype=np.uint8)
    for j in range(cb.num_blocks):
        codes[:, j] = _nearest(ts.tokens[:, j * B : (j + 1) * B], cb.entries[j])
    return QuantizedTokenSet(codes, cb.hash, ts.image_id)


def dequantize(q: QuantizedTokenSet, cb: Codebook) -> TokenSet:
    if q.codebook_hash != cb.hash:
        raise CodebookMismatchError("codes were produced with a different codebook")
    if q.codes.shape[1] != cb.num_blocks:
        raise DimensionMismatchError("code width does not match the codebook")
    blocks = cb.entries[np.arange(cb.num_blocks)[None, :], q.codes.astype(np.intp)]  # (T, N, B)
    return TokenSet(blocks.reshape(q.codes.shape[0], cb.dim), q.image_id)


def storage_report(T: int, D: int, B: int | None) -> dict:
    """Per-image bytes of raw float32 tokens versus one byte per block.

    The codebook itself is shared by all images and is not counted. ``B=None`` reports raw.
    """
    raw = 4 * D * T
    if B is None:
        return {"raw_bytes": raw, "compressed_bytes": raw, "factor": 1, "kB_per_img": round(raw / 1000)}
    if B < 1 or D % B:
        raise DimensionMismatchError(f"dimension {D} is not divisible by block size {B}")
    comp = T * D // B
    return {"raw_bytes": raw, "compressed_bytes": comp, "factor": 4 * B, "kB_per_img": round(comp / 1000)}


def storage_table(T: int = 1200, D: int = 768, block_sizes=STORAGE_BLOCK_SIZES) -> list[dict]:
    rows = [{"B": None, **storage_report(T, D, None)}]
    rows += [{"B": B, **storage_report(T, D, B)} for B in block_sizes]
    return rows
