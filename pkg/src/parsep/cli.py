"""Command-line entry points: ``synth``, ``train``, ``separate``, ``evaluate``,
``hpo`` and ``report``.

Every command reads one JSON config file; ``--set section.key=value`` overrides
individual keys (values are parsed as JSON when possible). Exit codes: 0 on
success, 2 for configuration errors, 3 for missing artifacts, 4 for numerical
failures.

Layout under ``output_dir``::

    data/manifest.json, data/<split>/<utt_id>/{mix,s1,s2}.wav
    model.bin, model.json, normalizer.json, train_report.json
    separated/<utt_id>/est{1,2}.wav
    evaluation.csv
    ledger.jsonl, hpo_summary.csv, report_<field>.csv
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dsp, nncore, separator, trainer
from .errors import (ConfigError, DivergedError, EmptyCorpus, MissingArtifact, NumericalError,
                     ParsepError)
from .hyperopt import AcquisitionConfig, Ledger, TrialOutcome, bo_loop, model_space, to_hyperparams
from .model import HP_RANGES, HyperParams, Network, count_params, resolve

log = logging.getLogger("parsep")

SPLITS = ("train", "val", "test")
EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERICAL = 0, 2, 3, 4
# which branch the report filter looks at for each categorical field
DEFAULT_BRANCH = {"upsampling": "cnn", "concat": "cnn", "lstm_direction": "lstm"}
CATEGORICAL_FIELDS = tuple(k for k, (kind, _) in HP_RANGES.items() if kind == "cat")

DEFAULTS = {
    "seed": 0,
    "output_dir": "run",
    "data": {"mode": "synth", "n_train": 20, "n_val": 5, "n_test": 5, "min_duration": 1.5,
             "max_duration": 2.5, "gain_db": 2.5, "source_dir": None, "dataset_dir": None},
    "model": "search",
    "train": {},
    "hpo": {"budget": None, "n_init": 10, "n_iter": 20, "acquisition": "expected_improvement", "xi": 0.01,
            "restarts": 10, "gp_restarts": 4, "space": {}},
    "separate": {"split": "test", "limit": None},
    "evaluate": {"split": "test", "estimates_dir": None},
    "report": {"ledger": None, "group_by": "upsampling", "top_k": 5, "branch": None, "min_fraction": 0.2},
}


# --- configuration -----------------------------------------------------------------------

@dataclass
class HpoConfig:
    budget: tuple[int, int] | None = None
    n_init: int = 10
    n_iter: int = 20
    acquisition: AcquisitionConfig = field(default_factory=AcquisitionConfig)
    gp_restarts: int = 4
    space: dict = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    data: dict
    model: HyperParams | str
    train: trainer.TrainConfig
    hpo: HpoConfig
    output_dir: Path
    seed: int
    sections: dict = field(default_factory=dict)  # separate / evaluate / report, as plain dicts

    @property
    def search(self) -> bool:
        return self.model == "search"

    @property
    def dataset_dir(self) -> Path:
        d = self.data.get("dataset_dir")
        return Path(d) if d else self.output_dir / "data"


def _merge(base: dict, new: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in new.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def apply_override(raw: dict, assignment: str) -> None:
    """Apply one ``a.b.c=value`` override in place."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, text = assignment.split("=", 1)
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    parts = key.strip().split(".")
    node = raw
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            node[p] = {}
        node = node[p]
    node[parts[-1]] = value


def load_config(path: str | os.PathLike | None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    raw: dict = {}
    if path is not None:
        if not os.path.exists(path):
            raise MissingArtifact(f"config file {path} does not exist")
        try:
            with open(path) as f:
                raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError("the config file must hold a JSON object")
    for o in overrides:
        apply_override(raw, o)
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return parse_config(_merge(DEFAULTS, raw))


def parse_config(raw: dict) -> ExperimentConfig:
    data = raw["data"]
    if data.get("mode") not in ("synth", "wav-dir"):
        raise ConfigError(f"data.mode must be 'synth' or 'wav-dir', got {data.get('mode')!r}")
    if data["mode"] == "wav-dir" and not data.get("source_dir"):
        raise ConfigError("data.mode 'wav-dir' needs data.source_dir")
    model = raw["model"]
    if model != "search":
        if not isinstance(model, dict):
            raise ConfigError("model must be 'search' or an object of hyperparameters")
        try:
            model = HyperParams.from_dict(model)
        except TypeError as e:
            raise ConfigError(str(e)) from e
        model.validate()
    tcfg = trainer.TrainConfig.from_dict({**raw["train"], "seed": raw["train"].get("seed", raw["seed"])})
    tcfg.validate()
    h = raw["hpo"]
    budget = h.get("budget")
    if budget is not None:
        if len(budget) != 2 or budget[0] > budget[1]:
            raise ConfigError(f"hpo.budget must be [lo, hi], got {budget}")
        budget = (int(budget[0]), int(budget[1]))
    if int(h["n_init"]) < 2 or int(h["n_iter"]) < 0:
        raise ConfigError("hpo.n_init must be >= 2 and hpo.n_iter >= 0")
    hpo = HpoConfig(budget, int(h["n_init"]), int(h["n_iter"]),
                    AcquisitionConfig(h["acquisition"], float(h["xi"]), int(h["restarts"])),
                    int(h["gp_restarts"]), dict(h.get("space") or {}))
    sections = {k: dict(raw[k]) for k in ("separate", "evaluate", "report")}
    return ExperimentConfig(data, model, tcfg, hpo, Path(raw["output_dir"]), int(raw["seed"]), sections)


# --- dataset I/O -------------------------------------------------------------------------

def _split_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def cmd_synth(cfg: ExperimentConfig) -> Path:
    """Generate the train / val / test corpora as WAV files plus ``manifest.json``."""
    src = cfg.data.get("source_dir")
    if src and not os.path.isdir(src):
        raise MissingArtifact(f"source_dir {src} does not exist")
    root = cfg.dataset_dir
    entries = []
    for k, split in enumerate(SPLITS):
        n = int(cfg.data.get(f"n_{split}", 0))
        if n == 0:
            continue
        scfg = dsp.SynthConfig(n, float(cfg.data["min_duration"]), float(cfg.data["max_duration"]),
                               float(cfg.data["gain_db"]), src)
        for m in dsp.synth_corpus(scfg, _split_seed(cfg.seed, k)):
            d = root / split / m.utt_id
            d.mkdir(parents=True, exist_ok=True)
            dsp.write_wav(d / "mix.wav", m.mixture)
            paths = []
            for j, s in enumerate(m.sources, 1):
                dsp.write_wav(d / f"s{j}.wav", s)
                paths.append(f"{split}/{m.utt_id}/s{j}.wav")
            entries.append({
                "split": split, "utt_id": m.utt_id, "n_samples": len(m.mixture),
                "mixture": f"{split}/{m.utt_id}/mix.wav", "sources": paths,
                "sha256": _sha256(d / "mix.wav"),
            })
    manifest = {"sample_rate": dsp.SAMPLE_RATE, "seed": cfg.seed, "config": cfg.data, "entries": entries}
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    print(f"wrote {len(entries)} mixtures to {root}")
    return root


def load_split(root: Path, split: str, limit: int | None = None) -> list[dsp.Mixture]:
    path = root / "manifest.json"
    if not path.exists():
        raise MissingArtifact(f"no dataset manifest at {path}; run 'synth' first")
    with open(path) as f:
        manifest = json.load(f)
    out = []
    for e in manifest["entries"]:
        if e["split"] != split:
            continue
        try:
            mix = dsp.read_wav(root / e["mixture"])
            srcs = [dsp.read_wav(root / p) for p in e["sources"]]
        except FileNotFoundError as err:
            raise MissingArtifact(f"dataset file missing: {err.filename}") from err
        out.append(dsp.Mixture(e["utt_id"], mix, srcs))
        if limit is not None and len(out) >= limit:
            break
    if not out:
        raise EmptyCorpus(f"split {split!r} of {root} is empty")
    return out


# --- training / inference ----------------------------------------------------------------

def _model_paths(cfg: ExperimentConfig) -> tuple[Path, Path, Path]:
    out = cfg.output_dir
    return out / "model", out / "normalizer.json", out / "train_report.json"


def cmd_train(cfg: ExperimentConfig) -> trainer.TrainReport:
    """Train the configured model; writes checkpoint, normalizer and report."""
    if cfg.search:
        raise ConfigError("'train' needs a fixed model; set model to a hyperparameter object")
    train_utts, norm = trainer.prepare(load_split(cfg.dataset_dir, "train"))
    val_utts, _ = trainer.prepare(load_split(cfg.dataset_dir, "val"), norm)
    spec = resolve(cfg.model)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    ckpt, norm_path, report_path = _model_paths(cfg)
    try:
        model, report = trainer.train(spec, train_utts, val_utts, cfg.train, log=log.info)
    except DivergedError as e:
        _write_json(report_path, e.report.to_dict())
        raise
    nncore.save_checkpoint(ckpt, model.state_dict(), {"hyperparams": cfg.model.to_dict(),
                                                      "partition": model.partition().to_dict()})
    _write_json(norm_path, norm.to_dict())
    _write_json(report_path, report.to_dict())
    print(f"best validation loss {report.best_val_loss:.4f}"
          + (" (aborted)" if report.aborted else "") + f"; checkpoint {ckpt}.bin")
    return report


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=1, sort_keys=True)


def load_model(cfg: ExperimentConfig) -> tuple[Network, dsp.Normalizer]:
    ckpt, norm_path, _ = _model_paths(cfg)
    for p in (Path(str(ckpt) + ".bin"), Path(str(ckpt) + ".json"), norm_path):
        if not p.exists():
            raise MissingArtifact(f"{p} not found; run 'train' first")
    state, extra = nncore.load_checkpoint(ckpt)
    model = Network(resolve(HyperParams.from_dict(extra["hyperparams"])))
    model.load_state_dict(state)
    with open(norm_path) as f:
        norm = dsp.Normalizer.from_dict(json.load(f))
    return model, norm


def cmd_separate(cfg: ExperimentConfig) -> Path:
    """Write ``separated/<utt_id>/est{k}.wav`` for every mixture of the chosen split."""
    sec = cfg.sections["separate"]
    model, norm = load_model(cfg)
    mixtures = load_split(cfg.dataset_dir, sec.get("split", "test"), sec.get("limit"))
    out = cfg.output_dir / "separated"
    for m in mixtures:
        d = out / m.utt_id
        d.mkdir(parents=True, exist_ok=True)
        for k, est in enumerate(separator.separate(model, m.mixture, norm, seed=cfg.seed), 1):
            dsp.write_wav(d / f"est{k}.wav", est)
    print(f"separated {len(mixtures)} mixtures into {out}")
    return out


def evaluate_dir(mixtures: Sequence[dsp.Mixture], est_dir: Path) -> list[dict]:
    rows = []
    for m in mixtures:
        d = est_dir / m.utt_id
        ests = []
        for k in range(1, len(m.sources) + 1):
            p = d / f"est{k}.wav"
            if not p.exists():
                raise MissingArtifact(f"estimate {p} not found; run 'separate' first")
            ests.append(dsp.read_wav(p))
        sc = separator.score_separation(m.sources, ests, m.mixture)
        rows.append({"utt_id": m.utt_id, "sdr1": sc.sdr_per_source[0], "sdr2": sc.sdr_per_source[1],
                     "baseline": float(np.mean(sc.sdr_mixture_baseline)), "improvement": sc.sdr_improvement})
    return rows


def cmd_evaluate(cfg: ExperimentConfig) -> float:
    """Score separated estimates; writes ``evaluation.csv`` and prints the mean improvement."""
    sec = cfg.sections["evaluate"]
    est_dir = Path(sec["estimates_dir"]) if sec.get("estimates_dir") else cfg.output_dir / "separated"
    if not est_dir.is_dir():
        raise MissingArtifact(f"estimates directory {est_dir} not found; run 'separate' first")
    mixtures = load_split(cfg.dataset_dir, sec.get("split", "test"))
    mixtures = [m for m in mixtures if (est_dir / m.utt_id).is_dir()] or mixtures
    rows = evaluate_dir(mixtures, est_dir)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    with open(cfg.output_dir / "evaluation.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=["utt_id", "sdr1", "sdr2", "baseline", "improvement"])
        w.writeheader()
        w.writerows({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()} for r in rows)
    mean = float(np.mean([r["improvement"] for r in rows]))
    print(f"mean SDR improvement {mean:.3f} dB over {len(rows)} mixtures")
    return mean


# --- hyperparameter search ---------------------------------------------------------------

class TrainingObjective:
    """Train one candidate network and report its best validation loss.

    The SDR improvement is measured on the validation mixtures for trials
    that were not aborted.
    """

    def __init__(self, train_mix: Sequence[dsp.Mixture], val_mix: Sequence[dsp.Mixture],
                 tcfg: trainer.TrainConfig, seed: int = 0):
        self.train_utts, self.norm = trainer.prepare(train_mix)
        self.val_utts, _ = trainer.prepare(val_mix, self.norm)
        self.val_mix = list(val_mix)
        self.tcfg = tcfg
        self.seed = seed

    def __call__(self, values: dict) -> TrialOutcome:
        spec = resolve(to_hyperparams(values))
        part = count_params(spec).to_dict()
        try:
            model, report = trainer.train(spec, self.train_utts, self.val_utts, self.tcfg)
        except DivergedError as e:
            e.partition = part
            raise
        if report.aborted:
            return TrialOutcome(report.best_val_loss, None, part, True)
        scores = [separator.score_separation(m.sources, separator.separate(model, m.mixture, self.norm,
                                                                           seed=self.seed), m.mixture)
                  for m in self.val_mix]
        return TrialOutcome(report.best_val_loss, float(np.mean([s.sdr_improvement for s in scores])), part)


@dataclass
class ReportRow:
    trial_id: int
    loss: float
    sdr_improvement: float | None
    cnn_params: int
    lstm_params: int
    fc_params: int
    categorical: dict

    @property
    def total_params(self) -> int:
        return self.cnn_params + self.lstm_params + self.fc_params


def _partition(rec) -> dict:
    if rec.partition:
        return rec.partition
    return count_params(resolve(HyperParams.from_dict(rec.params))).to_dict()


def report_rows(ledger: Ledger, clip: float | None = None) -> list[ReportRow]:
    """One row per trial, sorted by (clipped) loss then trial id."""
    rows = []
    for r in ledger:
        p = _partition(r)
        loss = min(r.loss, clip) if clip is not None else r.loss
        rows.append(ReportRow(r.trial_id, loss, r.sdr_improvement, p["cnn_params"], p["lstm_params"],
                              p["fc_params"], {k: r.params.get(k) for k in CATEGORICAL_FIELDS}))
    rows.sort(key=lambda x: (x.loss, x.trial_id))
    return rows


def write_summary(rows: Sequence[ReportRow], path: Path) -> None:
    cols = ["rank", "trial_id", "loss", "sdr_improvement", "cnn_params", "lstm_params", "fc_params",
            "total_params", *CATEGORICAL_FIELDS]
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for i, r in enumerate(rows, 1):
            w.writerow([i, r.trial_id, repr(r.loss), "" if r.sdr_improvement is None else repr(r.sdr_improvement),
                        r.cnn_params, r.lstm_params, r.fc_params, r.total_params,
                        *["" if r.categorical[k] is None else r.categorical[k] for k in CATEGORICAL_FIELDS]])


def cmd_hpo(cfg: ExperimentConfig) -> Ledger:
    """Bayesian search over the model space; resumes from an existing ledger."""
    if not cfg.search:
        raise ConfigError("'hpo' needs model set to \"search\"")
    space = model_space(cfg.hpo.space)
    objective = TrainingObjective(load_split(cfg.dataset_dir, "train"), load_split(cfg.dataset_dir, "val"),
                                  cfg.train, cfg.seed)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    ledger = bo_loop(space, objective, cfg.hpo.n_init, cfg.hpo.n_iter, cfg.hpo.budget, cfg.seed,
                     cfg.hpo.acquisition, cfg.output_dir / "ledger.jsonl", cfg.train.abort_threshold,
                     cfg.hpo.gp_restarts)
    rows = report_rows(ledger, cfg.train.abort_threshold)
    write_summary(rows, cfg.output_dir / "hpo_summary.csv")
    print(f"{len(ledger)} trials; best loss {rows[0].loss:.4f} (trial {rows[0].trial_id})")
    return ledger


# --- reporting ---------------------------------------------------------------------------

def group_report(ledger: Ledger, group_by: str, top_k: int = 5, branch: str | None = None,
                 min_fraction: float = 0.0) -> list[dict]:
    """Per category value: mean loss and SDR improvement over the best ``top_k``
    trials among those with at least ``min_fraction`` of their parameters in
    ``branch``. Groups without qualifying trials give an empty row."""
    if group_by not in CATEGORICAL_FIELDS:
        raise ConfigError(f"group_by must be one of {CATEGORICAL_FIELDS}, got {group_by!r}")
    if top_k < 1:
        raise ConfigError("top_k must be positive")
    branch = branch or DEFAULT_BRANCH[group_by]
    if branch not in ("cnn", "lstm", "fc"):
        raise ConfigError(f"branch must be cnn, lstm or fc, got {branch!r}")
    if len(ledger) == 0:
        raise EmptyCorpus("the ledger is empty")
    values = list(HP_RANGES[group_by][1])
    values += sorted({r.params.get(group_by) for r in ledger} - set(values) - {None})
    out = []
    for v in values:
        qual = []
        for r in ledger:
            if r.params.get(group_by) != v:
                continue
            p = _partition(r)
            if p[f"{branch}_params"] >= min_fraction * (p["cnn_params"] + p["lstm_params"] + p["fc_params"]):
                qual.append(r)
        best = sorted(qual, key=lambda r: (r.loss, r.trial_id))[:top_k]
        sdrs = [r.sdr_improvement for r in best if r.sdr_improvement is not None]
        out.append({
            "group": group_by, "value": v, "n_qualifying": len(qual), "n_used": len(best),
            "mean_loss": math.fsum(r.loss for r in best) / len(best) if best else None,
            "mean_sdr_improvement": math.fsum(sdrs) / len(sdrs) if sdrs else None,
            "trial_ids": [r.trial_id for r in best], "empty": not best,
        })
    return out


def cmd_report(cfg: ExperimentConfig) -> list[dict]:
    """Best-k averages per categorical value; writes ``report_<field>.csv``."""
    sec = cfg.sections["report"]
    path = Path(sec["ledger"]) if sec.get("ledger") else cfg.output_dir / "ledger.jsonl"
    if not path.exists():
        raise MissingArtifact(f"ledger {path} not found; run 'hpo' first")
    rows = group_report(Ledger.load(path), sec["group_by"], int(sec["top_k"]), sec.get("branch"),
                        float(sec["min_fraction"]))
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    out = cfg.output_dir / f"report_{sec['group_by']}.csv"
    cols = ["group", "value", "n_qualifying", "n_used", "mean_loss", "mean_sdr_improvement", "trial_ids", "empty"]
    with open(out, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for r in rows:
            w.writerow([r["group"], r["value"], r["n_qualifying"], r["n_used"],
                        "" if r["mean_loss"] is None else repr(r["mean_loss"]),
                        "" if r["mean_sdr_improvement"] is None else repr(r["mean_sdr_improvement"]),
                        " ".join(map(str, r["trial_ids"])), str(r["empty"]).lower()])
    for r in rows:
        if r["empty"]:
            print(f"{r['value']:>12}: no qualifying trials")
        else:
            sdr = "n/a" if r["mean_sdr_improvement"] is None else f"{r['mean_sdr_improvement']:.2f} dB"
            print(f"{r['value']:>12}: loss {r['mean_loss']:.4f}  SDR improvement {sdr}  (n={r['n_used']})")
    return rows


# --- entry point -------------------------------------------------------------------------

COMMANDS = {"synth": cmd_synth, "train": cmd_train, "separate": cmd_separate, "evaluate": cmd_evaluate,
            "hpo": cmd_hpo, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="parsep", description="Deep-clustering speech separation experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sp = sub.add_parser(name, help=(fn.__doc__ or "").strip().splitlines()[0] if fn.__doc__ else None)
        sp.add_argument("-c", "--config", help="JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. train.lr=0.0005 (repeatable)")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, args.set)
        COMMANDS[args.command](cfg)
    except (MissingArtifact, EmptyCorpus, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, ValueError, TypeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, DivergedError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ParsepError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
