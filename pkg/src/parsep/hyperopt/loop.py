"""The propose -> evaluate -> observe loop and its JSON-lines trial ledger."""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from ..errors import FeasibilityError
from .acquisition import AcquisitionConfig, propose
from .gp import gp_fit
from .space import ParamSpace

log = logging.getLogger(__name__)


@dataclass
class TrialOutcome:
    loss: float
    sdr_improvement: float | None = None
    partition: dict | None = None
    aborted: bool = False


@dataclass
class TrialRecord:
    trial_id: int
    params: dict
    encoded: list[float]
    loss: float
    sdr_improvement: float | None = None
    partition: dict | None = None
    aborted: bool = False
    seed: int = 0
    started: float = 0.0
    finished: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrialRecord":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class Ledger:
    records: list[TrialRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def sorted_by_loss(self) -> list[TrialRecord]:
        return sorted(self.records, key=lambda r: (r.loss, r.trial_id))

    def best(self) -> TrialRecord:
        return self.sorted_by_loss()[0]

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Ledger":
        records = []
        if os.path.exists(path):
            with open(path) as f:
                records = [TrialRecord.from_dict(json.loads(line)) for line in f if line.strip()]
        return cls(records)

    def append(self, rec: TrialRecord, path: str | os.PathLike | None = None) -> None:
        self.records.append(rec)
        if path is not None:
            with open(path, "a") as f:
                f.write(rec.to_json() + "\n")


def _as_outcome(result) -> TrialOutcome:
    if isinstance(result, TrialOutcome):
        return result
    return TrialOutcome(float(result))


def bo_loop(space: ParamSpace, objective: Callable[[dict], float | TrialOutcome], n_init: int = 10,
            n_iter: int = 20, budget: tuple[int, int] | None = None, seed: int = 0,
            acq: AcquisitionConfig | None = None, ledger_path: str | os.PathLike | None = None,
            abort_threshold: float | None = None, gp_restarts: int = 4) -> Ledger:
    """Run ``n_init`` random feasible trials, then ``n_iter`` GP-guided ones.

    With ``ledger_path`` the existing ledger is reloaded and only the missing
    trials are run. Every trial draws from its own generator seeded by
    ``(seed, trial_id)``, so a resumed run matches an uninterrupted one.
    An exception raised by the objective is recorded as an aborted trial at
    ``abort_threshold`` (or at the worst loss seen so far if no threshold is set).
    """
    if n_init < 2:
        raise ValueError("n_init must be at least 2")
    acq = acq or AcquisitionConfig()
    ledger = Ledger.load(ledger_path) if ledger_path is not None else Ledger()
    for i in range(len(ledger), n_init + n_iter):
        rng = np.random.default_rng([seed, i])
        if i < n_init:
            values = space.sample_feasible(rng, budget)
            if values is None:
                raise FeasibilityError("no feasible configuration found for the initial design")
        else:
            X = np.array([r.encoded for r in ledger])
            y = np.array([r.loss for r in ledger])
            gp = gp_fit(X, y, seed=rng, n_restarts=gp_restarts)
            values = propose(gp, space, budget, acq, rng, observed=X)
        started = time.time()
        try:
            out = _as_outcome(objective(values))
        except Exception as e:  # noqa: BLE001 - any trial failure is recorded, not fatal
            log.warning("trial %d failed: %s", i, e)
            fallback = abort_threshold if abort_threshold is not None else max(
                (r.loss for r in ledger), default=None)
            if fallback is None:
                raise
            out = TrialOutcome(fallback, aborted=True, partition=getattr(e, "partition", None))
        loss = out.loss
        if out.aborted and abort_threshold is not None:
            loss = abort_threshold
        if not np.isfinite(loss):
            raise FeasibilityError(f"objective returned non-finite loss {loss}")
        rec = TrialRecord(i, values, space.encode(values).tolist(), float(loss), out.sdr_improvement,
                          out.partition, out.aborted, seed, started, time.time())
        ledger.append(rec, ledger_path)
    return ledger


def random_search(space: ParamSpace, objective: Callable[[dict], float], n: int, seed: int = 0,
                  budget: tuple[int, int] | None = None) -> Ledger:
    """Baseline: ``n`` independent feasible random draws."""
    ledger = Ledger()
    for i in range(n):
        rng = np.random.default_rng([seed, i, 1])
        values = space.sample_feasible(rng, budget)
        loss = _as_outcome(objective(values)).loss
        ledger.append(TrialRecord(i, values, space.encode(values).tolist(), float(loss), seed=seed))
    return ledger
