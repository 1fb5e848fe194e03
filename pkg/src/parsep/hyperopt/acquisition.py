"""Expected improvement / probability of improvement (minimization) and the
multi-start L-BFGS proposal step."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from ..errors import ConfigError, FeasibilityError
from . import lbfgs
from .gp import GPState, gp_predict, gp_predict_grad
from .space import ParamSpace

KINDS = ("expected_improvement", "probability_of_improvement")
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class AcquisitionConfig:
    kind: str = "expected_improvement"
    xi: float = 0.01
    restarts: int = 10

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown acquisition {self.kind!r}; choose from {KINDS}")
        if self.xi < 0 or self.restarts < 1:
            raise ConfigError("xi must be >= 0 and restarts >= 1")


def _pdf(z):
    return _INV_SQRT_2PI * np.exp(-0.5 * z * z)


def improvement_scores(mu, sigma, best_y: float, xi: float, kind: str):
    """EI or PI for arrays of predictive means and standard deviations."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    imp = best_y - xi - mu
    pos = sigma > 0
    z = np.where(pos, imp / np.where(pos, sigma, 1.0), 0.0)
    if kind == "probability_of_improvement":
        return np.where(pos, ndtr(z), (imp > 0).astype(np.float64))
    ei = imp * ndtr(z) + sigma * _pdf(z)
    return np.where(pos, np.maximum(ei, 0.0), np.maximum(imp, 0.0))


def acquisition(gp: GPState, x: np.ndarray, best_y: float, cfg: AcquisitionConfig) -> float:
    mu, sd = gp_predict(gp, np.atleast_2d(x))
    return float(improvement_scores(mu, sd, best_y, cfg.xi, cfg.kind)[0])


def acquisition_and_grad(gp: GPState, x: np.ndarray, best_y: float, cfg: AcquisitionConfig
                         ) -> tuple[float, np.ndarray]:
    mu, sd, dmu, dsd = gp_predict_grad(gp, x)
    imp = best_y - cfg.xi - mu
    if sd <= 0:
        val = float(imp > 0) if cfg.kind == "probability_of_improvement" else max(imp, 0.0)
        grad = np.zeros_like(x) if cfg.kind == "probability_of_improvement" else (-dmu if imp > 0 else 0 * dmu)
        return val, grad
    z = imp / sd
    cdf, pdf = float(ndtr(z)), float(_pdf(z))
    dz = (-dmu * sd - imp * dsd) / (sd * sd)
    if cfg.kind == "probability_of_improvement":
        return cdf, pdf * dz
    return imp * cdf + sd * pdf, -dmu * cdf + dsd * pdf


def maximize_acquisition(gp: GPState, width: int, best_y: float, cfg: AcquisitionConfig,
                         rng: np.random.Generator, extra_starts=()) -> list[tuple[float, np.ndarray]]:
    """Local maxima from every start, best first."""
    starts = [rng.random(width) for _ in range(cfg.restarts)] + [np.asarray(s) for s in extra_starts]
    lo, hi = np.zeros(width), np.ones(width)

    def neg(x):
        v, g = acquisition_and_grad(gp, x, best_y, cfg)
        return -v, -g

    found = []
    for s in starts:
        res = lbfgs.minimize(neg, s, lo, hi, memory=10, max_iter=100, gtol=1e-8)
        found.append((-res.f, res.x))
    found.sort(key=lambda t: -t[0])
    return found


def propose(gp: GPState, space: ParamSpace, budget: tuple[int, int] | None, cfg: AcquisitionConfig,
            rng: np.random.Generator, observed: np.ndarray | None = None, fallback_pool: int = 64,
            max_draws: int = 10_000) -> dict:
    """Next point to evaluate.

    Candidates from the multi-start optimizer are decoded and screened in order
    of acquisition value; invalid, over/under-budget and already-evaluated
    points are skipped. If none survive, random feasible points are drawn
    (at most ``max_draws``) and the best of up to ``fallback_pool`` of them by
    acquisition value is returned.
    """
    best_y = float(np.min(gp.y))
    seen = set() if observed is None else {tuple(np.round(o, 12)) for o in np.atleast_2d(observed)}
    extra = [gp.X[int(np.argmin(gp.y))]]
    for _, x in maximize_acquisition(gp, space.width, best_y, cfg, rng, extra):
        values = space.decode(x)
        if tuple(np.round(space.encode(values), 12)) in seen:
            continue
        if space.feasible(values, budget):
            return values
    pool = []
    for _ in range(max_draws):
        v = space.sample(rng)
        if space.feasible(v, budget) and tuple(np.round(space.encode(v), 12)) not in seen:
            pool.append(v)
            if len(pool) >= fallback_pool:
                break
    if not pool:
        raise FeasibilityError(f"no feasible configuration found in {max_draws} random draws")
    enc = np.array([space.encode(v) for v in pool])
    mu, sd = gp_predict(gp, enc)
    scores = improvement_scores(mu, sd, best_y, cfg.xi, cfg.kind)
    return pool[int(np.argmax(scores))]
