"""Deep-clustering targets and the affinity-matching loss.

With embeddings V (TF x D) and one-hot targets U (TF x S) the loss is

    ||V V^T - U U^T||_F^2 / (TF)^2

evaluated through the D x D, D x S and S x S Gram matrices so it never forms
a TF x TF matrix.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .dsp import Spectrogram
from .errors import ConfigError, ShapeError
from .nncore import Tensor, make_node

N_SPEAKERS = 2


def make_targets(sources: Sequence[Spectrogram | np.ndarray]) -> np.ndarray:
    """One-hot (T, F, S) dominant-source assignment; ties go to the lower index."""
    if len(sources) != N_SPEAKERS:
        raise ConfigError(f"only {N_SPEAKERS}-speaker targets are supported, got {len(sources)}")
    mags = [np.abs(s.bins if isinstance(s, Spectrogram) else s) for s in sources]
    if mags[0].shape != mags[1].shape:
        raise ShapeError(f"source grids differ: {mags[0].shape} vs {mags[1].shape}")
    winner = np.argmax(np.stack(mags, axis=-1), axis=-1)
    return np.eye(N_SPEAKERS)[winner]


def _as_rows(V: np.ndarray, U: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if V.shape[:-1] != U.shape[:-1]:
        raise ShapeError(f"embedding grid {V.shape[:-1]} vs target grid {U.shape[:-1]}")
    return V.reshape(-1, V.shape[-1]), U.reshape(-1, U.shape[-1])


def dc_loss(V: np.ndarray, U: np.ndarray) -> tuple[float, np.ndarray]:
    """Normalized loss and its gradient with respect to ``V`` (same shape as V)."""
    v, u = _as_rows(np.asarray(V, dtype=np.float64), np.asarray(U, dtype=np.float64))
    n2 = float(v.shape[0]) ** 2
    vv = v.T @ v
    vu = v.T @ u
    uu = u.T @ u
    loss = (np.sum(vv * vv) - 2.0 * np.sum(vu * vu) + np.sum(uu * uu)) / n2
    grad = 4.0 * (v @ vv - u @ vu.T) / n2
    return float(loss), grad.reshape(np.shape(V))


def dc_loss_naive(V: np.ndarray, U: np.ndarray) -> float:
    """Same quantity through the explicit TF x TF affinity matrices."""
    v, u = _as_rows(np.asarray(V, dtype=np.float64), np.asarray(U, dtype=np.float64))
    diff = v @ v.T - u @ u.T
    return float(np.sum(diff * diff) / float(v.shape[0]) ** 2)


def dc_loss_batch(V: Tensor, U: np.ndarray) -> Tensor:
    """Mean per-item loss over the leading batch axis of (B, T, F, D) embeddings."""
    if V.data.ndim == 3:
        loss, grad = dc_loss(V.data, U)
        return make_node(np.array(loss), (V,), lambda g: (g * grad,), "dc_loss")
    B = V.shape[0]
    losses, grads = zip(*(dc_loss(V.data[b], U[b]) for b in range(B)))
    grad = np.stack(grads) / B
    return make_node(np.array(np.mean(losses)), (V,), lambda g: (g * grad,), "dc_loss")
