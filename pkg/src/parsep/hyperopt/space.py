"""Mixed integer / real / categorical search spaces mapped onto the unit hypercube."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..errors import RangeError
from ..model import HP_RANGES, HyperParams, active_fields, count_params, resolve, round_half_up


@dataclass(frozen=True)
class Integer:
    name: str
    lo: int
    hi: int
    width = 1


@dataclass(frozen=True)
class Real:
    name: str
    lo: float
    hi: float
    width = 1


@dataclass(frozen=True)
class Categorical:
    name: str
    choices: tuple

    @property
    def width(self) -> int:
        return len(self.choices)


Dimension = Integer | Real | Categorical
INACTIVE = 0.5


class ParamSpace:
    """Ordered dimensions plus optional conditional activity, validity
    constraint and trainable-parameter counter.

    Points are plain dicts ``{name: value}``; inactive dimensions hold None.
    """

    def __init__(self, dims: Sequence[Dimension],
                 active: Callable[[dict], set] | None = None,
                 constraint: Callable[[dict], bool] | None = None,
                 param_count: Callable[[dict], int] | None = None):
        self.dims = list(dims)
        self.active = active
        self.constraint = constraint
        self.param_count = param_count
        self.slices = {}
        pos = 0
        for d in self.dims:
            self.slices[d.name] = slice(pos, pos + d.width)
            pos += d.width
        self.width = pos

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.dims]

    def _active(self, values: dict) -> set:
        return set(self.names) if self.active is None else self.active(values)

    def encode(self, values: dict) -> np.ndarray:
        x = np.full(self.width, INACTIVE)
        act = self._active(values)
        for d in self.dims:
            if d.name not in act:
                continue
            v = values.get(d.name)
            sl = self.slices[d.name]
            if isinstance(d, Categorical):
                if v not in d.choices:
                    raise RangeError(f"{d.name}={v!r} not in {d.choices}")
                x[sl] = 0.0
                x[sl.start + d.choices.index(v)] = 1.0
            else:
                if v is None or not (d.lo <= v <= d.hi):
                    raise RangeError(f"{d.name}={v} outside [{d.lo}, {d.hi}]")
                x[sl] = (v - d.lo) / (d.hi - d.lo) if d.hi > d.lo else 0.0
        return x

    def decode(self, x: np.ndarray) -> dict:
        x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
        values = {}
        for d in self.dims:
            seg = x[self.slices[d.name]]
            if isinstance(d, Categorical):
                values[d.name] = d.choices[int(np.argmax(seg))]
            elif isinstance(d, Integer):
                values[d.name] = int(min(d.hi, max(d.lo, round_half_up(d.lo + seg[0] * (d.hi - d.lo)))))
            else:
                values[d.name] = float(d.lo + seg[0] * (d.hi - d.lo))
        act = self._active(values)
        return {k: (v if k in act else None) for k, v in values.items()}

    def canonical(self, values: dict) -> dict:
        return self.decode(self.encode(values))

    def sample(self, rng: np.random.Generator) -> dict:
        return self.decode(rng.random(self.width))

    def is_valid(self, values: dict) -> bool:
        return self.constraint is None or bool(self.constraint(values))

    def within_budget(self, values: dict, budget: tuple[int, int] | None) -> bool:
        if budget is None:
            return True
        if self.param_count is None:
            raise RangeError("this space has no parameter counter, so a budget cannot be enforced")
        return budget[0] <= self.param_count(values) <= budget[1]

    def feasible(self, values: dict, budget: tuple[int, int] | None = None) -> bool:
        return self.is_valid(values) and self.within_budget(values, budget)

    def sample_feasible(self, rng: np.random.Generator, budget: tuple[int, int] | None = None,
                        max_draws: int = 10_000) -> dict | None:
        for _ in range(max_draws):
            v = self.sample(rng)
            if self.feasible(v, budget):
                return v
        return None


def to_hyperparams(values: dict) -> HyperParams:
    return HyperParams.from_dict(values)


def model_space(overrides: dict | None = None, n_bins: int = 129, emb_dim: int = 20) -> ParamSpace:
    """The CNN / LSTM / FC hyperparameter space, optionally with narrowed ranges.

    ``overrides`` maps a field name to ``[lo, hi]`` (numeric) or a list of
    choices (categorical).
    """
    overrides = overrides or {}
    unknown = set(overrides) - set(HP_RANGES)
    if unknown:
        raise RangeError(f"unknown hyperparameters in overrides: {sorted(unknown)}")
    dims = []
    for name, (kind, rng) in HP_RANGES.items():
        rng = tuple(overrides.get(name, rng))
        if kind == "cat":
            dims.append(Categorical(name, rng))
        elif kind == "int":
            dims.append(Integer(name, int(rng[0]), int(rng[1])))
        else:
            dims.append(Real(name, float(rng[0]), float(rng[1])))

    def valid(values):
        return bool(values.get("num_enc_layers")) or bool(values.get("lstm_layers"))

    def n_params(values):
        return count_params(resolve(to_hyperparams(values), n_bins, emb_dim)).total

    return ParamSpace(dims, active=active_fields, constraint=valid, param_count=n_params)
