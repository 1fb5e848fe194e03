import csv
import hashlib
import json
import shutil

import numpy as np
import pytest

from parsep import cli, dsp, nncore
from parsep.errors import NumericalError
from parsep.hyperopt import Ledger, TrialRecord
from parsep.model import build, resolve

TINY_MODEL = {"lstm_layers": 1, "lstm_first_cells": 6, "lstm_direction": "bi", "fc_layers": 0}
TOY_SPACE = {"num_enc_layers": [0, 1], "first_enc_channels": [1, 3], "last_dec_channels": [1, 3],
             "kernel_t": [1, 2], "kernel_f": [1, 2], "lstm_layers": [0, 1], "lstm_first_cells": [2, 6],
             "fc_layers": [0, 1], "fc_first_units": [2, 8]}


def write_cfg(tmp_path, **sections):
    cfg = {"seed": 3, "output_dir": str(tmp_path / "run"),
           "data": {"n_train": 4, "n_val": 2, "n_test": 5, "min_duration": 0.6, "max_duration": 0.8},
           "model": TINY_MODEL,
           "train": {"stages": [{"segment_frames": 30, "epochs": 1}], "batch_size": 4, "abort_threshold": 10.0}}
    cfg.update(sections)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def digest(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("ds")
    path = write_cfg(tmp)
    assert cli.main(["synth", "-c", path]) == 0
    return tmp, path


def test_synth_manifest(dataset, tmp_path):
    tmp, path = dataset
    root = tmp / "run" / "data"
    man = json.loads((root / "manifest.json").read_text())
    assert len(man["entries"]) == 4 + 2 + 5
    assert sum(e["split"] == "test" for e in man["entries"]) == 5
    for e in man["entries"][:10]:
        mix = dsp.read_wav(root / e["mixture"]).samples
        srcs = [dsp.read_wav(root / p).samples for p in e["sources"]]
        np.testing.assert_array_equal(mix, srcs[0] + srcs[1])
    other = write_cfg(tmp_path)
    assert cli.main(["synth", "-c", other]) == 0
    assert digest(root / "manifest.json") == digest(tmp_path / "run" / "data" / "manifest.json")
    assert cli.main(["synth", "-c", other]) == 0
    assert digest(root / "manifest.json") == digest(tmp_path / "run" / "data" / "manifest.json")


def test_train_with_zero_lr_keeps_initialization(dataset):
    tmp, path = dataset
    assert cli.main(["train", "-c", path, "--set", "train.lr=0", "--set", "train.noise_std=0"]) == 0
    state, extra = nncore.load_checkpoint(tmp / "run" / "model")
    init = build(resolve(cli.load_config(path).model), seed=3).state_dict()
    assert state.keys() == init.keys()
    h = lambda s: hashlib.sha256(b"".join(s[k].tobytes() for k in sorted(s))).hexdigest()
    assert h(state) == h(init)
    assert extra["partition"]["total"] == sum(v.size for v in init.values())
    report = json.loads((tmp / "run" / "train_report.json").read_text())
    assert len(report["val_loss"]) == 1


def test_separate_then_evaluate(dataset, capsys):
    tmp, path = dataset
    assert cli.main(["train", "-c", path]) == 0
    assert cli.main(["separate", "-c", path]) == 0
    assert len(list((tmp / "run" / "separated").iterdir())) == 5
    assert cli.main(["evaluate", "-c", path]) == 0
    assert "mean SDR improvement" in capsys.readouterr().out
    rows = list(csv.DictReader(open(tmp / "run" / "evaluation.csv", encoding="utf-8")))
    assert list(rows[0]) == ["utt_id", "sdr1", "sdr2", "baseline", "improvement"]
    assert len(rows) == 5


def test_evaluate_oracle_estimates(dataset, tmp_path):
    tmp, path = dataset
    root = tmp / "run" / "data"
    est = tmp_path / "oracle"
    man = json.loads((root / "manifest.json").read_text())
    for e in man["entries"]:
        if e["split"] == "test":
            (est / e["utt_id"]).mkdir(parents=True)
            for k, p in enumerate(e["sources"], 1):
                shutil.copy(root / p, est / e["utt_id"] / f"est{k}.wav")
    cfg = cli.load_config(path, [f"evaluate.estimates_dir={est}", f"output_dir={tmp_path / 'out'}",
                                 f"data.dataset_dir={root}"])
    cli.cmd_evaluate(cfg)
    rows = list(csv.DictReader(open(tmp_path / "out" / "evaluation.csv", encoding="utf-8")))
    for r in rows:
        assert float(r["sdr1"]) == 100.0 and float(r["sdr2"]) == 100.0
        assert float(r["improvement"]) == pytest.approx(100.0 - float(r["baseline"]), abs=1e-5)


def test_missing_artifacts_exit_3(tmp_path):
    path = write_cfg(tmp_path)
    for cmd in ("train", "separate", "evaluate", "report"):
        assert cli.main([cmd, "-c", path]) == 3
    assert cli.main(["train", "-c", str(tmp_path / "nope.json")]) == 3


def test_config_errors_exit_2(tmp_path):
    path = write_cfg(tmp_path)
    assert cli.main(["hpo", "-c", path]) == 2  # fixed model cannot be searched
    assert cli.main(["train", "-c", path, "--set", "model=search"]) == 2
    assert cli.main(["train", "-c", path, "--set", "model.kernel_t=99", "--set", "model.num_enc_layers=1"]) == 2
    assert cli.main(["synth", "-c", path, "--set", "bogus.key=1"]) == 2
    assert cli.main(["synth", "-c", path, "--set", "data.min_duration=5"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["synth", "-c", str(bad)]) == 2


def test_numerical_failure_exit_4(tmp_path, monkeypatch):
    def boom(cfg):
        raise NumericalError("singular")
    monkeypatch.setitem(cli.COMMANDS, "synth", boom)
    assert cli.main(["synth", "-c", write_cfg(tmp_path)]) == 4


def test_override_parsing():
    raw = {"train": {"lr": 1}}
    cli.apply_override(raw, "train.lr=0.5")
    cli.apply_override(raw, "hpo.budget=[1, 2]")
    cli.apply_override(raw, "report.group_by=concat")
    assert raw == {"train": {"lr": 0.5}, "hpo": {"budget": [1, 2]}, "report": {"group_by": "concat"}}


def test_hpo_smoke_and_resume(tmp_path):
    path = write_cfg(tmp_path, model="search",
                     data={"n_train": 3, "n_val": 2, "n_test": 0, "min_duration": 0.6, "max_duration": 0.6},
                     hpo={"n_init": 2, "n_iter": 1, "space": TOY_SPACE, "restarts": 2, "gp_restarts": 2})
    assert cli.main(["synth", "-c", path]) == 0
    assert cli.main(["hpo", "-c", path]) == 0
    ledger = tmp_path / "run" / "ledger.jsonl"
    assert len(ledger.read_text().splitlines()) == 3
    rows = list(csv.DictReader(open(tmp_path / "run" / "hpo_summary.csv", encoding="utf-8")))
    losses = [float(r["loss"]) for r in rows]
    assert losses == sorted(losses) and max(losses) <= 10.0
    for r in rows:
        assert int(r["total_params"]) == int(r["cnn_params"]) + int(r["lstm_params"]) + int(r["fc_params"])
    assert cli.main(["hpo", "-c", path, "--set", "hpo.n_iter=2"]) == 0
    assert len(ledger.read_text().splitlines()) == 4


# --- report arithmetic -----------------------------------------------------------------------

def fabricated_ledger(n=30, seed=0):
    """Trials with dyadic losses/SDRs so every average is exact in binary."""
    rng = np.random.default_rng(seed)
    recs = []
    for i in range(n):
        ups = ["bypass", "unpooling", "none"][i % 3]
        cnn = int(rng.integers(0, 1000))
        lstm = int(rng.integers(0, 1000))
        fc = int(rng.integers(1, 200))
        params = {"upsampling": ups, "concat": ["broadcast", "flattening"][i % 2],
                  "lstm_direction": ["uni", "bi"][(i // 2) % 2]}
        recs.append(TrialRecord(i, params, [], float(rng.integers(1, 64)) / 64,
                                float(rng.integers(-32, 320)) / 32, {"cnn_params": cnn, "lstm_params": lstm,
                                                                     "fc_params": fc, "total": cnn + lstm + fc}))
    return Ledger(recs)


def oracle_groups(ledger, field, branch, frac, k):
    out = {}
    for r in ledger:
        p = r.partition
        tot = p["cnn_params"] + p["lstm_params"] + p["fc_params"]
        if p[f"{branch}_params"] / tot >= frac:
            out.setdefault(r.params[field], []).append(r)
    res = {}
    for v, rs in out.items():
        rs = sorted(rs, key=lambda r: (r.loss, r.trial_id))[:k]
        res[v] = (sum(r.loss for r in rs) / len(rs), sum(r.sdr_improvement for r in rs) / len(rs), len(rs))
    return res


@pytest.mark.parametrize("field,branch", [("upsampling", "cnn"), ("concat", "cnn"), ("lstm_direction", "lstm")])
@pytest.mark.parametrize("frac", [0.0, 0.2, 0.6])
def test_group_report_matches_oracle(field, branch, frac):
    led = fabricated_ledger()
    rows = cli.group_report(led, field, 5, None, frac)
    ref = oracle_groups(led, field, branch, frac, 5)
    for r in rows:
        if r["value"] in ref:
            assert (r["mean_loss"], r["mean_sdr_improvement"], r["n_used"]) == ref[r["value"]]
        else:
            assert r["empty"] and r["mean_loss"] is None


def test_group_report_saturation_and_vacuous_filter():
    led = fabricated_ledger(7)
    rows = cli.group_report(led, "upsampling", 50, "cnn", 0.0)
    for r in rows:
        group = [t for t in led if t.params["upsampling"] == r["value"]]
        assert r["n_used"] == r["n_qualifying"] == len(group)
        assert r["mean_loss"] == sum(t.loss for t in group) / len(group)


def test_group_report_empty_group_row():
    led = Ledger([TrialRecord(0, {"upsampling": "bypass"}, [], 0.125, 2.0,
                              {"cnn_params": 10, "lstm_params": 90, "fc_params": 0, "total": 100})])
    rows = cli.group_report(led, "upsampling", 5, "cnn", 0.2)
    assert all(r["empty"] for r in rows)
    rows = cli.group_report(led, "upsampling", 5, "cnn", 0.1)
    assert rows[0]["mean_loss"] == 0.125 and rows[1]["empty"] and rows[2]["empty"]


def test_cmd_report_writes_csv(tmp_path):
    led = fabricated_ledger()
    path = tmp_path / "l.jsonl"
    for r in led:
        Ledger().append(r, path)
    cfg = cli.load_config(None, [f"output_dir={tmp_path}", f"report.ledger={path}", "report.group_by=concat"])
    cli.cmd_report(cfg)
    rows = list(csv.DictReader(open(tmp_path / "report_concat.csv", encoding="utf-8")))
    assert [r["value"] for r in rows] == ["broadcast", "flattening"]
    ref = oracle_groups(led, "concat", "cnn", 0.2, 5)
    for r in rows:
        assert float(r["mean_loss"]) == ref[r["value"]][0]
