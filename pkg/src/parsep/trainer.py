"""Curriculum training of the embedding network with the deep-clustering loss."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import dsp
from .dcloss import dc_loss, dc_loss_batch, make_targets
from .errors import ConfigError, DivergedError, EmptyCorpus
from .model import ModelSpec, Network
from .nncore import AdamState, Tensor, adam_step


@dataclass
class Utterance:
    utt_id: str
    features: np.ndarray  # (T, F) normalized log-magnitude
    targets: np.ndarray  # (T, F, S) one-hot dominant source

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]


def analyse(m: dsp.Mixture) -> tuple[dsp.Spectrogram, list[dsp.Spectrogram]]:
    mix, _ = dsp.analysis_pad(m.mixture.samples)
    srcs = [dsp.analysis_pad(s.samples)[0] for s in m.sources]
    return dsp.stft(mix), [dsp.stft(s) for s in srcs]


def prepare(mixtures: Sequence[dsp.Mixture], normalizer: dsp.Normalizer | None = None
            ) -> tuple[list[Utterance], dsp.Normalizer]:
    """Features and targets for each mixture; fits the normalizer if none is given."""
    if not mixtures:
        raise EmptyCorpus("no mixtures to prepare")
    specs = [analyse(m) for m in mixtures]
    if normalizer is None:
        normalizer = dsp.fit_normalizer([s for s, _ in specs])
    utts = [Utterance(m.utt_id, dsp.log_features(mix, normalizer), make_targets(srcs))
            for m, (mix, srcs) in zip(mixtures, specs)]
    return utts, normalizer


@dataclass
class Stage:
    segment_frames: int | None  # None means whole utterances
    epochs: int


@dataclass
class TrainConfig:
    stages: list[Stage] = field(default_factory=lambda: [Stage(100, 5), Stage(500, 5), Stage(None, 10)])
    noise_std: float = 0.2
    lr: float = 1e-3
    batch_size: int = 8
    patience: int = 5
    abort_threshold: float = 0.17
    seed: int = 0

    def validate(self) -> None:
        if not self.stages:
            raise ConfigError("curriculum needs at least one stage")
        if self.noise_std < 0 or self.abort_threshold <= 0 or self.batch_size < 1 or self.patience < 1:
            raise ConfigError("invalid training configuration")
        for s in self.stages:
            if s.epochs < 0 or (s.segment_frames is not None and s.segment_frames < 1):
                raise ConfigError(f"invalid curriculum stage {s}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "stages" in d:
            d["stages"] = [s if isinstance(s, Stage) else Stage(s.get("segment_frames"), int(s["epochs"]))
                           for s in d["stages"]]
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    stage_starts: list[int] = field(default_factory=list)
    initial_val_loss: float = math.nan
    best_val_loss: float = math.inf
    stopped_early: bool = False
    aborted: bool = False
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def validate(model: Network, data: Sequence[Utterance]) -> float:
    """Mean normalized deep-clustering loss over whole utterances, no input noise."""
    if not data:
        raise EmptyCorpus("empty validation set")
    return float(np.mean([dc_loss(model.embed(u.features), u.targets)[0] for u in data]))


def _crop(u: Utterance, frames: int | None, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if frames is None or u.n_frames <= frames:
        return u.features, u.targets
    start = int(rng.integers(0, u.n_frames - frames + 1))
    return u.features[start:start + frames], u.targets[start:start + frames]


def _step(model: Network, opt: AdamState, batch: list[tuple[np.ndarray, np.ndarray]],
          noise_std: float, rng: np.random.Generator) -> float:
    """One optimizer step on a batch; items of equal length share a forward pass."""
    model.zero_grad()
    groups: dict[int, list[int]] = {}
    for i, (x, _) in enumerate(batch):
        groups.setdefault(x.shape[0], []).append(i)
    total = 0.0
    for idx in groups.values():
        x = np.stack([batch[i][0] for i in idx])
        y = np.stack([batch[i][1] for i in idx])
        if noise_std > 0:
            x = x + rng.normal(0.0, noise_std, x.shape)
        loss = dc_loss_batch(model(x), y)
        if not np.isfinite(loss.data):
            raise DivergedError("training loss became non-finite")
        w = len(idx) / len(batch)
        loss.backward(np.array(w))
        total += w * float(loss.data)
    adam_step(opt, model.params, model.grads())
    return total


def train(spec: ModelSpec, train_data: Sequence[Utterance], val_data: Sequence[Utterance],
          cfg: TrainConfig, model: Network | None = None, log=None) -> tuple[Network, TrainReport]:
    """Run the curriculum. Weights carry over between stages; at the end of
    each stage the best-validating weights seen so far are restored.

    Raises DivergedError (with the partial report on ``.report``) if the loss
    stops being finite.
    """
    cfg.validate()
    if not train_data or not val_data:
        raise EmptyCorpus("training and validation sets must be nonempty")
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    model = model or Network(spec, seed=cfg.seed)
    opt = AdamState(lr=cfg.lr)
    report = TrainReport()
    report.initial_val_loss = validate(model, val_data)
    best_state = model.state_dict()
    best = report.initial_val_loss
    epoch = 0
    for k, stage in enumerate(cfg.stages):
        report.stage_starts.append(epoch)
        stale = 0
        improved_last = False
        for _ in range(stage.epochs):
            order = rng.permutation(len(train_data))
            losses = []
            for s in range(0, len(order), cfg.batch_size):
                batch = [_crop(train_data[i], stage.segment_frames, rng) for i in order[s:s + cfg.batch_size]]
                try:
                    losses.append(_step(model, opt, batch, cfg.noise_std, rng))
                except DivergedError as e:
                    report.aborted = True
                    report.best_val_loss = cfg.abort_threshold
                    report.wall_clock = time.perf_counter() - t0
                    e.report = report
                    raise
            report.train_loss.append(float(np.mean(losses)))
            v = validate(model, val_data)
            report.val_loss.append(v)
            epoch += 1
            if log:
                log(f"stage {k + 1} epoch {epoch}: train {report.train_loss[-1]:.4f} val {v:.4f}")
            improved_last = v < best
            if improved_last:
                best, stale = v, 0
                best_state = model.state_dict()
            else:
                stale += 1
                if stale >= cfg.patience:
                    report.stopped_early = True
                    break
        model.load_state_dict(best_state)
        if k == 0 and best > cfg.abort_threshold and not improved_last:
            report.aborted = True
            break
    report.best_val_loss = cfg.abort_threshold if report.aborted else (
        min(report.val_loss) if report.val_loss else report.initial_val_loss)
    report.wall_clock = time.perf_counter() - t0
    return model, report
