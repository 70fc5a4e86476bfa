"""AdamW with decoupled weight decay over named tensors, plus global-norm
gradient clipping and the divergence error both trainers raise.

Updates are functional: step() returns a fresh tensor dict and never mutates
the inputs, so forward traces taken before an update stay valid. Moment
buffers and per-tensor step counts live in the optimizer; skipping a tensor
(e.g. a frozen adapter) leaves its moments untouched, exactly as if no
gradient had ever been produced for it.
"""

from __future__ import annotations

import math

import numpy as np


class TrainingDivergedError(RuntimeError):
    """Loss or gradients stopped being finite at a given step."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"training diverged at step {step}")


class AdamW:
    def __init__(
        self,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise ValueError("betas must lie in [0, 1)")
        if eps <= 0.0:
            raise ValueError("eps must be positive")
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(
        self,
        params: dict[str, np.ndarray],
        grads: dict[str, np.ndarray],
        lr_for: dict[str, float] | float,
        skip: frozenset[str] | set[str] = frozenset(),
    ) -> dict[str, np.ndarray]:
        """Apply one update and return new tensors; skipped keys are copied."""
        out: dict[str, np.ndarray] = {}
        for key, p in params.items():
            if key in skip or key not in grads:
                out[key] = p.copy()
                continue
            g = grads[key]
            lr = lr_for[key] if isinstance(lr_for, dict) else lr_for
            if key not in self.m:
                self.m[key] = np.zeros_like(p)
                self.v[key] = np.zeros_like(p)
                self.t[key] = 0
            self.t[key] += 1
            t = self.t[key]
            self.m[key] = self.beta1 * self.m[key] + (1.0 - self.beta1) * g
            self.v[key] = self.beta2 * self.v[key] + (1.0 - self.beta2) * g * g
            m_hat = self.m[key] / (1.0 - self.beta1**t)
            v_hat = self.v[key] / (1.0 - self.beta2**t)
            new = p - lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay != 0.0:
                new = new - lr * self.weight_decay * p
            out[key] = new
        return out

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Moment buffers as named tensors (for checkpointing)."""
        state: dict[str, np.ndarray] = {}
        for key in self.m:
            state[f"m.{key}"] = self.m[key]
            state[f"v.{key}"] = self.v[key]
        return state

    def load_state(self, state: dict[str, np.ndarray], t: dict[str, int]) -> None:
        self.m = {k[2:]: v.copy() for k, v in state.items() if k.startswith("m.")}
        self.v = {k[2:]: v.copy() for k, v in state.items() if k.startswith("v.")}
        self.t = dict(t)


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    return math.sqrt(total)


def clip_global_norm(
    grads: dict[str, np.ndarray], max_norm: float
) -> tuple[dict[str, np.ndarray], float, float]:
    """Scale all gradients so their joint norm is at most max_norm.

    Returns (clipped gradients, raw norm, clipped norm).
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    raw = global_grad_norm(grads)
    if raw <= max_norm:
        return grads, raw, raw
    scale = max_norm / raw
    clipped = {k: g * scale for k, g in grads.items()}
    return clipped, raw, max_norm
