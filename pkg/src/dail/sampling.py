"""Temperature / nucleus sampling by inverse CDF over token-id order."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch


@dataclass(frozen=True)
class SamplerConfig:
    temperature: float = 0.6
    top_p: float = 0.95
    seed: int = 0

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")


def _as_array(logits) -> np.ndarray:
    if isinstance(logits, torch.Tensor):
        logits = logits.detach().cpu().to(torch.float64).numpy()
    return np.asarray(logits, dtype=np.float64)


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = _as_array(logits)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def sampling_distribution(logits, sampler: SamplerConfig) -> np.ndarray:
    """The distribution a draw is taken from, rows of shape [..., V].

    Temperature 0 is a point mass on the argmax (lowest id wins ties).
    """
    z = _as_array(logits)
    if sampler.temperature == 0:
        out = np.zeros_like(z)
        idx = np.argmax(z, axis=-1)
        np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
        return out
    p = softmax(z / sampler.temperature)
    if sampler.top_p < 1.0:
        order = np.argsort(-p, axis=-1, kind="stable")
        sorted_p = np.take_along_axis(p, order, axis=-1)
        cum = np.cumsum(sorted_p, axis=-1)
        # keep tokens whose preceding mass is still below top_p
        keep_sorted = (cum - sorted_p) < sampler.top_p
        keep_sorted[..., 0] = True
        keep = np.zeros_like(keep_sorted)
        np.put_along_axis(keep, order, keep_sorted, axis=-1)
        p = np.where(keep, p, 0.0)
        p = p / p.sum(axis=-1, keepdims=True)
    return p


def inverse_cdf(dist: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Smallest id whose cumulative mass exceeds ``u`` (per row)."""
    cdf = np.cumsum(dist, axis=-1)
    cdf[..., -1] = np.inf
    u = np.asarray(u, dtype=np.float64)
    idx = (cdf <= u[..., None]).sum(axis=-1)
    # skip zero-mass ids that a rounding edge could land on
    dist_at = np.take_along_axis(dist, idx[..., None], axis=-1)[..., 0]
    if np.any(dist_at == 0):
        for r in np.flatnonzero(np.atleast_1d(dist_at == 0)):
            row = dist.reshape(-1, dist.shape[-1])[r]
            nz = np.flatnonzero(row)
            j = int(idx.reshape(-1)[r])
            later = nz[nz >= j]
            idx.reshape(-1)[r] = later[0] if later.size else nz[-1]
    return idx


def sample_token(logits, sampler: SamplerConfig, rng: np.random.Generator) -> tuple[int, float]:
    """Draw one token; return it with its temperature-1 model probability.

    Exactly one uniform is consumed from ``rng`` per call, whatever the
    temperature, so streams stay aligned across decoding settings.
    """
    z = _as_array(logits)
    u = rng.random()
    tok = int(inverse_cdf(sampling_distribution(z, sampler), np.asarray(u)))
    return tok, float(softmax(z)[tok])


def sample_rows(logits, sampler: SamplerConfig, rngs: Sequence[np.random.Generator]) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise ``sample_token`` over a [B, V] batch, row ``i`` using ``rngs[i]``."""
    z = _as_array(logits)
    u = np.array([g.random() for g in rngs], dtype=np.float64)
    toks = inverse_cdf(sampling_distribution(z, sampler), u)
    probs = np.take_along_axis(softmax(z), toks[:, None], axis=-1)[:, 0]
    return toks, probs
