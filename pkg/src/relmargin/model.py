"""Two-tower embedding model and its exact backward pass.

Each tower is affine -> ReLU -> affine -> L2 normalization, mapping raw
video or text features into a shared d-dimensional space where the dot
product of the unit-norm outputs is the cosine similarity.  The backward
pass propagates through the normalization exactly (projection onto the
tangent space), which is what the finite-difference gradient checks pin
down.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"RELM1"

#: Flattening order of the parameter blocks, as stored in checkpoints.
PARAM_ORDER = (
    ("video", "W1"),
    ("video", "b1"),
    ("video", "W2"),
    ("video", "b2"),
    ("text", "W1"),
    ("text", "b1"),
    ("text", "W2"),
    ("text", "b2"),
)


@dataclass
class Tower:
    """One encoder: x @ W1 + b1 -> ReLU -> @ W2 + b2 -> L2 normalize."""

    W1: np.ndarray  # (f, h)
    b1: np.ndarray  # (h,)
    W2: np.ndarray  # (h, d)
    b2: np.ndarray  # (d,)

    def copy(self) -> "Tower":
        return Tower(self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy())


@dataclass
class ForwardCache:
    """Intermediate activations needed by the backward pass."""

    x: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    z2: np.ndarray
    norm: np.ndarray  # (n, 1)
    y: np.ndarray


class EmbeddingModel:
    """Video tower f and text tower g into a shared unit sphere."""

    def __init__(self, video: Tower, text: Tower):
        self.video = video
        self.text = text
        self.f_v, h_v = video.W1.shape
        self.f_q, h_q = text.W1.shape
        if h_v != h_q or video.W2.shape[1] != text.W2.shape[1]:
            raise ValueError("video and text towers must share hidden and output widths")
        self.h = h_v
        self.d = video.W2.shape[1]

    # -- construction -------------------------------------------------------

    @classmethod
    def init(cls, f_v: int, f_q: int, h: int, d: int, seed: int = 0) -> "EmbeddingModel":
        """Seeded uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
        rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x7077)))

        def layer(fan_in, fan_out):
            bound = 1.0 / np.sqrt(fan_in)
            W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=fan_out)
            return W, b

        towers = []
        for f in (f_v, f_q):
            W1, b1 = layer(f, h)
            W2, b2 = layer(h, d)
            towers.append(Tower(W1, b1, W2, b2))
        return cls(*towers)

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(self.video.copy(), self.text.copy())

    def tower(self, side: str) -> Tower:
        if side == "video":
            return self.video
        if side == "text":
            return self.text
        raise ValueError(f"side must be 'video' or 'text', got {side!r}")

    # -- forward ------------------------------------------------------------

    def forward(self, side: str, X: np.ndarray) -> ForwardCache:
        t = self.tower(side)
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != t.W1.shape[0]:
            raise ValueError(
                f"{side} features have dim {X.shape[1]}, expected {t.W1.shape[0]}"
            )
        z1 = X @ t.W1 + t.b1
        a1 = np.maximum(z1, 0.0)
        z2 = a1 @ t.W2 + t.b2
        norm = np.linalg.norm(z2, axis=1, keepdims=True)
        if np.any(norm < 1e-12):
            raise RuntimeError(
                f"{side} encoder produced a zero vector before normalization"
            )
        y = z2 / norm
        return ForwardCache(x=X, z1=z1, a1=a1, z2=z2, norm=norm, y=y)

    def encode_video(self, X: np.ndarray) -> np.ndarray:
        """Unit-norm d-dimensional embeddings for rows of video features."""
        return self.forward("video", X).y

    def encode_text(self, X: np.ndarray) -> np.ndarray:
        """Unit-norm d-dimensional embeddings for rows of text features."""
        return self.forward("text", X).y

    # -- backward -----------------------------------------------------------

    def backward(self, side: str, cache: ForwardCache, grad_y: np.ndarray) -> dict:
        """Parameter gradients of a scalar loss given dL/dy for the rows
        in ``cache``.  The normalization backward is the tangent-space
        projection (I - y y^T) / ||z2||; the ReLU subgradient at 0 is 0.
        """
        t = self.tower(side)
        gy = np.asarray(grad_y, dtype=np.float64)
        dz2 = (gy - (gy * cache.y).sum(axis=1, keepdims=True) * cache.y) / cache.norm
        dW2 = cache.a1.T @ dz2
        db2 = dz2.sum(axis=0)
        da1 = dz2 @ t.W2.T
        dz1 = da1 * (cache.z1 > 0.0)
        dW1 = cache.x.T @ dz1
        db1 = dz1.sum(axis=0)
        return {"W1": dW1, "b1": db1, "W2": dW2, "b2": db2}

    # -- flat parameter views (gradient checking, optimizer state) ----------

    def param_blocks(self) -> list[np.ndarray]:
        return [getattr(self.tower(side), name) for side, name in PARAM_ORDER]

    def to_vector(self) -> np.ndarray:
        return np.concatenate([b.ravel() for b in self.param_blocks()])

    def set_vector(self, vec: np.ndarray) -> None:
        offset = 0
        for block in self.param_blocks():
            n = block.size
            block[...] = vec[offset : offset + n].reshape(block.shape)
            offset += n
        if offset != vec.size:
            raise ValueError(f"parameter vector has {vec.size} entries, expected {offset}")

    @property
    def n_params(self) -> int:
        return sum(b.size for b in self.param_blocks())

    # -- checkpoint ---------------------------------------------------------

    def save(self, path) -> None:
        """Binary checkpoint: magic, little-endian u32 dims (f_v, f_q, h, d),
        then row-major little-endian f64 blocks in `PARAM_ORDER`."""
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<4I", self.f_v, self.f_q, self.h, self.d))
            for block in self.param_blocks():
                fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "EmbeddingModel":
        with open(path, "rb") as fh:
            magic = fh.read(len(MAGIC))
            if magic != MAGIC:
                raise ValueError(f"not a model checkpoint (bad magic {magic!r})")
            f_v, f_q, h, d = struct.unpack("<4I", fh.read(16))
            shapes = {
                "video": [(f_v, h), (h,), (h, d), (d,)],
                "text": [(f_q, h), (h,), (h, d), (d,)],
            }
            towers = {}
            for side in ("video", "text"):
                blocks = []
                for shape in shapes[side]:
                    n = int(np.prod(shape))
                    raw = fh.read(8 * n)
                    if len(raw) != 8 * n:
                        raise ValueError("checkpoint truncated")
                    blocks.append(np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape))
                towers[side] = Tower(*blocks)
            if fh.read(1):
                raise ValueError("checkpoint has trailing bytes")
        return cls(towers["video"], towers["text"])
