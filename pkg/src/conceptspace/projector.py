"""Trainable projector from per-frame features to the text concept space.

Pipeline per sample: optional square adapter on the raw frame features,
additive sinusoidal position codes, one residual block of temporal multi-head
self-attention (no layer norm), a pooling step (learned-query attention, mean,
or max) and a final linear map into concept space. Forward returns a trace
holding every intermediate; the backward pass consumes the trace and produces
analytic gradients for all parameters plus the input frames.

The adapter is initialized to the identity: it stands in for fine-tuning an
upstream frozen encoder, so at init it must pass features through unchanged.
All other weights start near zero (Gaussian, configurable sigma) with zero
biases, which makes the initial projector output vanishingly small.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import AttentionCache, attention_backward, attention_forward
from .numerics import gaussian_sample

POOLING_MODES = ("attention", "mean", "max")


@dataclass(frozen=True)
class ProjectorConfig:
    frame_dim: int = 1536
    concept_dim: int = 1024
    heads: int = 8
    dropout_p: float = 0.1
    pooling: str = "attention"
    init_sigma: float = 1e-5
    use_adapter: bool = True
    use_temporal_attention: bool = True

    def __post_init__(self):
        if self.frame_dim < 1 or self.concept_dim < 1:
            raise ValueError("frame_dim and concept_dim must be positive")
        if self.frame_dim % self.heads != 0:
            raise ValueError(
                f"frame_dim {self.frame_dim} must be divisible by heads {self.heads}"
            )
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.pooling not in POOLING_MODES:
            raise ValueError(f"pooling must be one of {POOLING_MODES}, got {self.pooling!r}")
        if self.init_sigma < 0:
            raise ValueError("init_sigma must be >= 0")


# Adapter is listed first so freeze/unfreeze logic can address it by name.
ADAPTER_KEY = "adapter"


@dataclass
class ProjectorParams:
    """Named tensors of the projector; insertion order is the canonical order."""

    tensors: dict[str, np.ndarray]

    def copy(self) -> "ProjectorParams":
        return ProjectorParams({k: v.copy() for k, v in self.tensors.items()})

    def __getitem__(self, key: str) -> np.ndarray:
        return self.tensors[key]

    def keys(self) -> list[str]:
        return list(self.tensors.keys())


def init_projector(cfg: ProjectorConfig, rng: np.random.Generator) -> ProjectorParams:
    """Gaussian near-zero init for the connector, identity for the adapter."""
    d_f, d_c, s = cfg.frame_dim, cfg.concept_dim, cfg.init_sigma
    tensors: dict[str, np.ndarray] = {}
    if cfg.use_adapter:
        tensors[ADAPTER_KEY] = np.eye(d_f)
    for name in ("attn.wq", "attn.wk", "attn.wv", "attn.wo"):
        tensors[name] = gaussian_sample(rng, (d_f, d_f), 0.0, s)
    tensors["cls"] = gaussian_sample(rng, (d_f,), 0.0, s)
    for name in ("pool.wq", "pool.wk", "pool.wv", "pool.wo"):
        tensors[name] = gaussian_sample(rng, (d_f, d_f), 0.0, s)
    tensors["out.w"] = gaussian_sample(rng, (d_c, d_f), 0.0, s)
    tensors["out.b"] = np.zeros(d_c)
    return ProjectorParams(tensors)


def sinusoidal_pe(length: int, dim: int) -> np.ndarray:
    """Interleaved sin/cos position codes; pair 2i and 2i+1 share a frequency."""
    if dim % 2 != 0:
        raise ValueError(f"dim must be even for interleaved sin/cos codes, got {dim}")
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    positions = np.arange(length, dtype=np.float64)[:, None]
    inv_freq = np.exp(np.arange(0, dim, 2, dtype=np.float64) * -(math.log(10000.0) / dim))
    angles = positions * inv_freq[None, :]
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe


@dataclass
class ForwardTrace:
    """Everything the backward pass needs, captured at forward time."""

    cfg: ProjectorConfig
    frames: np.ndarray
    adapted: np.ndarray
    with_pe: np.ndarray
    attn_cache: AttentionCache | None
    hidden: np.ndarray  # (T, frame_dim) after the temporal block
    pool_cache: AttentionCache | None
    max_indices: np.ndarray | None
    pooled: np.ndarray
    params: ProjectorParams
    output: np.ndarray


def temporal_attention(
    params: ProjectorParams,
    x: np.ndarray,
    cfg: ProjectorConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Residual multi-head self-attention over the rows of x."""
    if not cfg.use_temporal_attention:
        return x.copy()
    out, _ = attention_forward(
        x, x,
        params["attn.wq"], params["attn.wk"], params["attn.wv"], params["attn.wo"],
        cfg.heads,
        dropout_p=cfg.dropout_p, rng=rng, training=training,
    )
    return x + out


def attention_pool(params: ProjectorParams, x: np.ndarray, cfg: ProjectorConfig) -> np.ndarray:
    """Collapse (T, frame_dim) rows to one frame_dim vector per cfg.pooling."""
    if cfg.pooling == "mean":
        return x.mean(axis=0)
    if cfg.pooling == "max":
        return x.max(axis=0)
    out, _ = attention_forward(
        params["cls"][None, :], x,
        params["pool.wq"], params["pool.wk"], params["pool.wv"], params["pool.wo"],
        cfg.heads,
    )
    return out[0]


def project(
    params: ProjectorParams,
    cfg: ProjectorConfig,
    frames: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, ForwardTrace]:
    """Map a (T, frame_dim) frame stack to a concept_dim embedding."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != cfg.frame_dim:
        raise ValueError(
            f"frames must be (T, {cfg.frame_dim}), got shape {frames.shape}"
        )
    if frames.shape[0] < 1:
        raise ValueError("need at least one frame")

    adapted = frames @ params[ADAPTER_KEY] if cfg.use_adapter else frames
    with_pe = adapted + sinusoidal_pe(frames.shape[0], cfg.frame_dim)

    attn_cache = None
    if cfg.use_temporal_attention:
        attn_out, attn_cache = attention_forward(
            with_pe, with_pe,
            params["attn.wq"], params["attn.wk"], params["attn.wv"], params["attn.wo"],
            cfg.heads,
            dropout_p=cfg.dropout_p, rng=rng, training=training,
        )
        hidden = with_pe + attn_out
    else:
        hidden = with_pe

    pool_cache = None
    max_indices = None
    if cfg.pooling == "attention":
        pool_out, pool_cache = attention_forward(
            params["cls"][None, :], hidden,
            params["pool.wq"], params["pool.wk"], params["pool.wv"], params["pool.wo"],
            cfg.heads,
        )
        pooled = pool_out[0]
    elif cfg.pooling == "mean":
        pooled = hidden.mean(axis=0)
    else:
        max_indices = hidden.argmax(axis=0)
        pooled = hidden[max_indices, np.arange(cfg.frame_dim)]

    output = params["out.w"] @ pooled + params["out.b"]
    trace = ForwardTrace(
        cfg=cfg, frames=frames, adapted=adapted, with_pe=with_pe,
        attn_cache=attn_cache, hidden=hidden, pool_cache=pool_cache,
        max_indices=max_indices, pooled=pooled, params=params, output=output,
    )
    return output, trace


def project_backward(trace: ForwardTrace, upstream: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss through project().

    `upstream` is dLoss/dOutput (concept_dim,). Returns gradients keyed like
    the parameter tensors, plus "frames" for the input.
    """
    cfg = trace.cfg
    params = trace.params
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (cfg.concept_dim,):
        raise ValueError(
            f"upstream gradient must have shape ({cfg.concept_dim},), got {upstream.shape}"
        )

    grads: dict[str, np.ndarray] = {}
    grads["out.w"] = np.outer(upstream, trace.pooled)
    grads["out.b"] = upstream.copy()
    g_pooled = params["out.w"].T @ upstream

    t = trace.hidden.shape[0]
    if cfg.pooling == "attention":
        g_q_in, g_hidden, g_wq, g_wk, g_wv, g_wo = attention_backward(
            trace.pool_cache, g_pooled[None, :]
        )
        grads["pool.wq"] = g_wq
        grads["pool.wk"] = g_wk
        grads["pool.wv"] = g_wv
        grads["pool.wo"] = g_wo
        grads["cls"] = g_q_in[0]
    elif cfg.pooling == "mean":
        g_hidden = np.tile(g_pooled / t, (t, 1))
        _zero_pool_grads(grads, params)
    else:
        g_hidden = np.zeros_like(trace.hidden)
        g_hidden[trace.max_indices, np.arange(cfg.frame_dim)] = g_pooled
        _zero_pool_grads(grads, params)

    if cfg.use_temporal_attention:
        g_xq, g_xkv, g_wq, g_wk, g_wv, g_wo = attention_backward(trace.attn_cache, g_hidden)
        grads["attn.wq"] = g_wq
        grads["attn.wk"] = g_wk
        grads["attn.wv"] = g_wv
        grads["attn.wo"] = g_wo
        # Residual: hidden = with_pe + attn(with_pe), and with_pe feeds both
        # the query and key/value sides.
        g_with_pe = g_hidden + g_xq + g_xkv
    else:
        for name in ("attn.wq", "attn.wk", "attn.wv", "attn.wo"):
            if name in params.tensors:
                grads[name] = np.zeros_like(params[name])
        g_with_pe = g_hidden

    # Position codes are constant, so the gradient passes through unchanged.
    if cfg.use_adapter:
        grads[ADAPTER_KEY] = trace.frames.T @ g_with_pe
        grads["frames"] = g_with_pe @ params[ADAPTER_KEY].T
    else:
        grads["frames"] = g_with_pe
    return grads


def _zero_pool_grads(grads: dict[str, np.ndarray], params: ProjectorParams) -> None:
    for name in ("pool.wq", "pool.wk", "pool.wv", "pool.wo", "cls"):
        if name in params.tensors:
            grads[name] = np.zeros_like(params[name])


def small_config(
    frame_dim: int,
    concept_dim: int,
    heads: int = 4,
    pooling: str = "attention",
    dropout_p: float = 0.1,
    init_sigma: float = 1e-5,
    use_adapter: bool = True,
    use_temporal_attention: bool = True,
) -> ProjectorConfig:
    """Convenience constructor for desk-scale runs."""
    return ProjectorConfig(
        frame_dim=frame_dim,
        concept_dim=concept_dim,
        heads=heads,
        pooling=pooling,
        dropout_p=dropout_p,
        init_sigma=init_sigma,
        use_adapter=use_adapter,
        use_temporal_attention=use_temporal_attention,
    )


def config_to_dict(cfg: ProjectorConfig) -> dict:
    return {
        "frame_dim": cfg.frame_dim,
        "concept_dim": cfg.concept_dim,
        "heads": cfg.heads,
        "dropout_p": cfg.dropout_p,
        "pooling": cfg.pooling,
        "init_sigma": cfg.init_sigma,
        "use_adapter": cfg.use_adapter,
        "use_temporal_attention": cfg.use_temporal_attention,
    }


def config_from_dict(d: dict) -> ProjectorConfig:
    optional = (
        "heads", "dropout_p", "pooling", "init_sigma",
        "use_adapter", "use_temporal_attention",
    )
    kwargs = {k: d[k] for k in optional if k in d}
    return ProjectorConfig(
        frame_dim=int(d["frame_dim"]), concept_dim=int(d["concept_dim"]), **kwargs
    )
