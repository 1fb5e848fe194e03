"""Embedding clustering, binary masking, resynthesis and SDR scoring."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import dsp
from .errors import ShapeError, TooFewPoints, UndefinedReference

SDR_CAP = 100.0


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    history: list[float]  # inertia after each Lloyd iteration of the kept restart


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = np.sum(x * x, axis=1)[:, None] - 2.0 * x @ c.T + np.sum(c * c, axis=1)[None, :]
    return np.maximum(d, 0.0)


def _plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    closest = _sq_dists(x, centers[0][None])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        i = rng.choice(len(x), p=closest / total) if total > 0 else int(rng.integers(len(x)))
        centers.append(x[i])
        closest = np.minimum(closest, _sq_dists(x, x[i][None])[:, 0])
    return np.array(centers)


def _lloyd(x, centers, max_iter, tol):
    history = []
    prev = np.inf
    for _ in range(max_iter):
        d = _sq_dists(x, centers)
        labels = np.argmin(d, axis=1)
        for j in range(len(centers)):
            members = labels == j
            if members.any():  # empty clusters keep their centroid
                centers[j] = x[members].mean(axis=0)
        inertia = float(_sq_dists(x, centers)[np.arange(len(x)), labels].sum())
        history.append(inertia)
        if np.isfinite(prev) and prev - inertia <= tol * prev:
            break
        prev = inertia
    d = _sq_dists(x, centers)
    labels = np.argmin(d, axis=1)
    return labels, centers, float(d[np.arange(len(x)), labels].sum()), history


def kmeans(points: np.ndarray, k: int, seed: int = 0, n_init: int = 10, max_iter: int = 300,
           tol: float = 1e-6) -> KMeansResult:
    """k-means++ seeding, ``n_init`` restarts, lowest inertia kept.

    Lloyd iterations stop when the relative inertia change drops below ``tol``.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"points must be (M, D), got {x.shape}")
    if len(x) < k or k < 1:
        raise TooFewPoints(f"{len(x)} points cannot form {k} clusters")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        labels, centers, inertia, hist = _lloyd(x, _plusplus(x, k, rng), max_iter, tol)
        if best is None or inertia < best.inertia:
            best = KMeansResult(labels, centers, inertia, hist)
    return best


def make_masks(V: np.ndarray, n_speakers: int = 2, seed: int = 0) -> np.ndarray:
    """Binary (S, T, F) masks from clustering the (T, F, D) embeddings."""
    T, F, D = V.shape
    res = kmeans(V.reshape(-1, D), n_speakers, seed=seed)
    return (res.labels.reshape(T, F)[None] == np.arange(n_speakers)[:, None, None]).astype(np.float64)


def apply_masks(Y: dsp.Spectrogram, masks: np.ndarray) -> list[dsp.Spectrogram]:
    if masks.shape[1:] != Y.bins.shape:
        raise ShapeError(f"masks {masks.shape[1:]} vs spectrogram {Y.bins.shape}")
    return [dsp.Spectrogram(m * Y.bins, Y.frame_len, Y.hop) for m in masks]


def sdr(reference: dsp.Waveform | np.ndarray, estimate: dsp.Waveform | np.ndarray) -> float:
    """Scale-invariant SDR in dB, clipped to +/-100 dB.

    The estimate is projected onto the reference with a single least-squares
    gain; the residual counts as distortion.
    """
    r = np.asarray(getattr(reference, "samples", reference), dtype=np.float64)
    e = np.asarray(getattr(estimate, "samples", estimate), dtype=np.float64)
    if r.shape != e.shape:
        raise ShapeError(f"reference {r.shape} vs estimate {e.shape}")
    rr = float(r @ r)
    if rr == 0.0:
        raise UndefinedReference("SDR is undefined for an all-zero reference")
    target = (float(e @ r) / rr) * r
    num = float(target @ target)
    den = float((e - target) @ (e - target))
    if num == 0.0:
        return -SDR_CAP
    if den == 0.0 or num / den > 10 ** (SDR_CAP / 10):
        return SDR_CAP
    return float(np.clip(10.0 * np.log10(num / den), -SDR_CAP, SDR_CAP))


@dataclass
class SeparationScore:
    sdr_per_source: list[float]
    sdr_mixture_baseline: list[float]
    permutation: tuple[int, ...]

    @property
    def sdr_improvement(self) -> float:
        return float(np.mean(self.sdr_per_source) - np.mean(self.sdr_mixture_baseline))


def score_separation(sources: Sequence, estimates: Sequence, mixture) -> SeparationScore:
    """Best-permutation SDR of the estimates plus the unprocessed-mixture baseline."""
    if len(sources) != len(estimates):
        raise ShapeError(f"{len(sources)} sources vs {len(estimates)} estimates")
    best, best_perm = None, None
    for perm in itertools.permutations(range(len(estimates))):
        scores = [sdr(sources[s], estimates[p]) for s, p in enumerate(perm)]
        if best is None or np.mean(scores) > np.mean(best):
            best, best_perm = scores, perm
    baseline = [sdr(s, mixture) for s in sources]
    return SeparationScore(best, baseline, best_perm)


def separate(model, mixture: dsp.Waveform, normalizer: dsp.Normalizer, n_speakers: int = 2,
             seed: int = 0) -> list[dsp.Waveform]:
    """Embed, cluster, mask and resynthesize one mixture."""
    padded, left = dsp.analysis_pad(mixture.samples)
    Y = dsp.stft(padded)
    V = model.embed(dsp.log_features(Y, normalizer))
    return resynthesize(Y, make_masks(V, n_speakers, seed), len(mixture), left, len(padded))


def resynthesize(Y: dsp.Spectrogram, masks: np.ndarray, n: int, left: int, padded_len: int
                 ) -> list[dsp.Waveform]:
    return [dsp.Waveform(dsp.istft(X, padded_len).samples[left:left + n]) for X in apply_masks(Y, masks)]


def ideal_binary_masks(sources: Sequence[dsp.Spectrogram]) -> np.ndarray:
    mags = np.stack([np.abs(s.bins) for s in sources])
    winner = np.argmax(mags, axis=0)
    return (winner[None] == np.arange(len(sources))[:, None, None]).astype(np.float64)


def ibm_separate(m: dsp.Mixture) -> list[dsp.Waveform]:
    """Oracle separation with ideal binary masks computed from the true sources."""
    padded, left = dsp.analysis_pad(m.mixture.samples)
    Y = dsp.stft(padded)
    srcs = [dsp.stft(dsp.analysis_pad(s.samples)[0]) for s in m.sources]
    return resynthesize(Y, ideal_binary_masks(srcs), len(m.mixture), left, len(padded))
