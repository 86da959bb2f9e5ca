"""Neural building blocks on top of the autodiff tape.

Dense layers, the scaled dot-product scorer, a multi-head graph
attention layer over a masked adjacency matrix, the Adam optimizer, and
npz checkpoints that carry the run-config hash.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

_ATTN_MASK_NEG = -1e9


@dataclass(frozen=True)
class GatLayerConfig:
    in_dim: int
    out_dim: int
    heads: int = 2
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.out_dim % self.heads != 0:
            raise ValueError("out_dim must be divisible by heads")


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_dense(rng, in_dim: int, out_dim: int) -> dict[str, np.ndarray]:
    return {
        "w": glorot_uniform(rng, in_dim, out_dim, (in_dim, out_dim)),
        "b": np.zeros(out_dim),
    }


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, w), b)


def scaled_dot(q: Tensor, e: Tensor) -> Tensor:
    """Per-node scores (q . E_i) / sqrt(d) for q of length d and E of n x d."""
    d = q.data.shape[-1]
    if e.data.shape[-1] != d:
        raise ValueError("q and node embeddings disagree on dimension")
    qcol = ad.reshape(q, (d, 1))
    return ad.mul_const(ad.reshape(ad.matmul(e, qcol), (e.data.shape[0],)), 1.0 / np.sqrt(d))


def init_gat_layer(rng, cfg: GatLayerConfig) -> dict[str, np.ndarray]:
    dh = cfg.out_dim // cfg.heads
    return {
        "w": glorot_uniform(rng, cfg.in_dim, cfg.out_dim, (cfg.in_dim, cfg.out_dim)),
        "a_src": glorot_uniform(rng, dh, 1, (cfg.heads, dh, 1)),
        "a_dst": glorot_uniform(rng, dh, 1, (cfg.heads, dh, 1)),
        "a_match": np.ones((cfg.heads, 1, 1)),
        "w_self": glorot_uniform(rng, cfg.in_dim, cfg.out_dim, (cfg.in_dim, cfg.out_dim)),
        "b": np.zeros(cfg.out_dim),
    }


def attention_bias(adj: np.ndarray) -> np.ndarray:
    """Additive mask from a 0/1 adjacency: 0 where attention is allowed.

    Self-loops are always allowed, so an isolated node attends to itself.
    The adjacency is treated as undirected (symmetrized).
    """
    allowed = (adj + adj.T) > 0
    np.fill_diagonal(allowed, True)
    return np.where(allowed, 0.0, _ATTN_MASK_NEG)


def gat_layer(h: Tensor, adj: np.ndarray, params: dict[str, Tensor], cfg: GatLayerConfig,
              match: Tensor | None = None) -> Tensor:
    """Multi-head additive graph attention restricted to adjacent pairs,
    plus a parallel self projection.

    Attention weights over each node's allowed neighborhood form a
    probability distribution; masked pairs get a -1e9 logit offset. The
    self projection lets a node keep its own content separate from the
    attention mix (additive attention has no way to single out i == j).
    An optional per-node ``match`` score is added to the attention
    logits with a learnable per-head gain, steering attention toward
    question-relevant neighbors.
    """
    n = h.data.shape[0]
    if h.data.shape[1] != cfg.in_dim:
        raise ValueError(f"expected node features of dim {cfg.in_dim}")
    if adj.shape != (n, n):
        raise ValueError("adjacency shape does not match node count")
    dh = cfg.out_dim // cfg.heads

    hp = ad.matmul(h, params["w"])                       # n x (heads*dh)
    hp3 = ad.transpose(ad.reshape(hp, (n, cfg.heads, dh)), (1, 0, 2))  # heads x n x dh

    src = ad.matmul(hp3, params["a_src"])                # heads x n x 1
    dst = ad.matmul(hp3, params["a_dst"])                # heads x n x 1
    logits = ad.add(src, ad.transpose(dst, (0, 2, 1)))   # heads x n x n
    logits = ad.leaky_relu(logits, cfg.leaky_slope)
    if match is not None:
        if match.data.shape != (n,):
            raise ValueError("match scores must have one entry per node")
        bias = ad.mul(params["a_match"], ad.reshape(match, (1, 1, n)))
        logits = ad.add(logits, bias)
    logits = ad.add_const(logits, attention_bias(adj)[None, :, :])
    attn = ad.softmax(logits)

    out = ad.matmul(attn, hp3)                           # heads x n x dh
    out = ad.reshape(ad.transpose(out, (1, 0, 2)), (n, cfg.out_dim))
    out = ad.add(out, ad.matmul(h, params["w_self"]))
    return ad.add(out, params["b"])


def gat_attention_weights(h: np.ndarray, adj: np.ndarray, params: dict[str, np.ndarray], cfg: GatLayerConfig) -> np.ndarray:
    """Forward-only attention matrix (heads x n x n), for inspection/tests."""
    with ad.no_grad():
        ph = {k: Tensor(v) for k, v in params.items()}
        n = h.shape[0]
        dh = cfg.out_dim // cfg.heads
        hp3 = ad.transpose(ad.reshape(ad.matmul(Tensor(h), ph["w"]), (n, cfg.heads, dh)), (1, 0, 2))
        src = ad.matmul(hp3, ph["a_src"])
        dst = ad.matmul(hp3, ph["a_dst"])
        logits = ad.leaky_relu(ad.add(src, ad.transpose(dst, (0, 2, 1))), cfg.leaky_slope)
        logits = ad.add_const(logits, attention_bias(adj)[None, :, :])
        return ad.softmax(logits).data


class Adam:
    """Standard adaptive-moment optimizer with bias correction."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def save_checkpoint(path, params: dict[str, Tensor], meta: dict) -> None:
    """Self-describing npz: parameter arrays plus a JSON metadata blob
    (run config hash, seed, vocabularies)."""
    arrays = {f"param/{k}": p.data for k, p in params.items()}
    arrays["__meta__"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    np.savez(path, **arrays)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"].tobytes()).decode("utf-8"))
        params = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    return params, meta


def load_into(params: dict[str, Tensor], stored: dict[str, np.ndarray]) -> None:
    """Copy stored arrays into live parameters; reject any shape mismatch."""
    missing = set(params) - set(stored)
    extra = set(stored) - set(params)
    if missing or extra:
        raise ValueError(f"checkpoint mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for k, p in params.items():
        if stored[k].shape != p.data.shape:
            raise ValueError(
                f"shape mismatch for '{k}': checkpoint {stored[k].shape} vs model {p.data.shape}"
            )
    for k, p in params.items():
        p.data = stored[k].astype(np.float64).copy()
