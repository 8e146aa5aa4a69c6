import copy
import re

import numpy as np
import pytest
import yaml

from seada.cli import main
from seada.config import ConfigError, dump_config, load_config, parse_config
from seada.data import load_volume_store, store_hash
from seada.evaluation import Report
from seada.ldr import load_ldrs, save_ldrs
from seada.trainer import read_history

from .conftest import TINY

ERR = re.compile(r"^SEADA-E\d{3}: \S.*$")


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def assert_error(code, err, expected):
    assert code != 0
    lines = err.strip().splitlines()
    assert len(lines) == 1 and ERR.match(lines[0]), err
    assert lines[0].startswith(expected)


# ---------------------------------------------------------------- config


def test_default_config_is_complete():
    cfg = load_config(None)
    assert cfg.phantom.shape == (32, 32, 32)
    assert [d.name for d in cfg.phantom.domains if d.role == "train"] == ["site-A", "site-B", "site-C", "site-D",
                                                                          "site-E"]
    assert set(cfg.train) == {"CAE", "ADA", "MDADA", "SEADA"}


def test_unknown_keys_are_errors():
    for path, key in [((), "extra"), (("phantom",), "colour"), (("training", "defaults"), "lr"),
                      (("evaluation",), "k")]:
        doc = copy.deepcopy(TINY)
        node = doc
        for p in path:
            node = node.setdefault(p, {})
        node[key] = 1
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config(doc)


def test_schema_version_required():
    doc = copy.deepcopy(TINY)
    del doc["schema_version"]
    with pytest.raises(ConfigError, match="schema_version"):
        parse_config(doc)


def test_unknown_method_rejected():
    doc = copy.deepcopy(TINY)
    doc["methods"] = ["CAE", "VAE"]
    with pytest.raises(ConfigError, match="VAE"):
        parse_config(doc)


def test_config_dump_roundtrip():
    cfg = parse_config(copy.deepcopy(TINY))
    again = parse_config(yaml.safe_load(dump_config(cfg)))
    assert dump_config(again) == dump_config(cfg)


def test_seed_override_reaches_every_section():
    cfg = parse_config(copy.deepcopy(TINY), seed=11)
    assert cfg.phantom.master_seed == 11
    assert all(c.seed == 11 for c in cfg.train.values())


# ---------------------------------------------------------------- commands


def test_gen_data_counts_force_and_determinism(tiny_config, tmp_path, capsys):
    out = tmp_path / "run"
    code, text, _ = run(capsys, "gen-data", "--config", tiny_config, "--out", out)
    assert code == 0
    assert "72 volumes" in text
    manifest = load_volume_store(out / "data")
    totals = [int(line.split()[-1]) for line in text.splitlines()[1:6]]
    assert sum(totals) == len(manifest.samples) == 72
    h = store_hash(out / "data")

    code, _, err = run(capsys, "gen-data", "--config", tiny_config, "--out", out)
    assert_error(code, err, "SEADA-E002")
    code, _, _ = run(capsys, "gen-data", "--config", tiny_config, "--out", out, "--force")
    assert code == 0 and store_hash(out / "data") == h


@pytest.fixture
def generated(tiny_config, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["gen-data", "--config", str(tiny_config), "--out", str(out)]) == 0
    capsys.readouterr()
    return tiny_config, out


@pytest.mark.parametrize("method", ["COMBAT", "NOISE", "VAE"])
def test_train_rejects_non_trainable(generated, capsys, method):
    cfg, out = generated
    code, _, err = run(capsys, "train", "--config", cfg, "--out", out, "--method", method)
    assert_error(code, err, "SEADA-E004")


def test_train_extract_pipeline(generated, capsys):
    cfg, out = generated
    code, _, _ = run(capsys, "train", "--config", cfg, "--out", out, "--method", "cae")
    assert code == 0
    hist = read_history(out / "models" / "CAE.history.tsv")
    # 2 epochs x floor(38 training patients / 8) batches x 1 stage
    assert len(hist) == 2 * (38 // 8) * 1
    code, _, _ = run(capsys, "train", "--config", cfg, "--out", out, "--method", "SEADA")
    assert code == 0
    assert len(read_history(out / "models" / "SEADA.history.tsv")) == 2 * (38 // 8) * 3

    code, _, _ = run(capsys, "extract", "--out", out, "--method", "CAE")
    assert code == 0
    ldr = out / "ldrs" / "CAE.ldr"
    store = load_ldrs(ldr)
    assert len(store) == 72
    first = ldr.read_bytes()
    code, _, _ = run(capsys, "extract", "--out", out, "--method", "CAE", "--force")
    assert code == 0 and ldr.read_bytes() == first


def test_harmonize_noise_and_combat(generated, capsys):
    cfg, out = generated
    run(capsys, "train", "--config", cfg, "--out", out, "--method", "CAE")
    run(capsys, "extract", "--out", out, "--method", "CAE")
    base = load_ldrs(out / "ldrs" / "CAE.ldr")

    code, _, _ = run(capsys, "harmonize", "--out", out, "--method", "NOISE", "--sigma", 0,
                     "--output", out / "n0.ldr")
    assert code == 0 and np.array_equal(load_ldrs(out / "n0.ldr").z, base.z)

    code, text, _ = run(capsys, "harmonize", "--out", out, "--method", "COMBAT", "--output", out / "c.ldr")
    assert code == 0
    test_ids = [p for p, d in zip(base.patient_id, base.domain) if d >= 3]
    skipped = text.split("unseen domains): ")[1].strip().split(", ")
    assert skipped == test_ids
    assert len(load_ldrs(out / "c.ldr")) == len(base) - len(test_ids)

    train_only = base.where_domain([0, 1, 2])
    save_ldrs(out / "train_only.ldr", train_only)
    code, text, _ = run(capsys, "harmonize", "--out", out, "--method", "COMBAT", "--input", out / "train_only.ldr",
                        "--output", out / "c2.ldr")
    assert code == 0 and "skipped" not in text
    assert len(load_ldrs(out / "c2.ldr")) == len(train_only)

    code, _, err = run(capsys, "harmonize", "--out", out, "--method", "PCA")
    assert_error(code, err, "SEADA-E004")


def test_evaluate_requires_baseline(generated, capsys):
    cfg, out = generated
    run(capsys, "train", "--config", cfg, "--out", out, "--method", "ADA")
    run(capsys, "extract", "--out", out, "--method", "ADA")
    code, _, err = run(capsys, "evaluate", "--out", out, "--ldr", f"ADA={out / 'ldrs' / 'ADA.ldr'}")
    assert_error(code, err, "SEADA-E007")


def test_run_all_report(tiny_config, tmp_path, capsys):
    out = tmp_path / "run"
    code, text, _ = run(capsys, "run-all", "--config", tiny_config, "--out", out)
    assert code == 0
    report = Report.from_json((out / "report.json").read_text())
    names = [r.method for r in report.rows]
    assert names == ["3D-CAE", "Noise", "ComBat", "ComBat no-cov", "ADA", "MD-ADA", "SE-ADA"]
    for r in report.rows:
        if r.method.startswith(("Noise", "ComBat")):
            assert r.rmse_mean is None and r.ssim_mean is None
        else:
            assert r.rmse_mean is not None
    assert report.rows[0].clustering_reduction_percent == 0.0
    assert Report.from_json(report.to_json()).to_json() == report.to_json()
    assert (out / "report.txt").read_text() == text

    code, again, _ = run(capsys, "report", "--out", out)
    assert code == 0 and again == text
    # re-evaluating the same artifacts gives the same bytes
    first = (out / "report.json").read_bytes()
    code, _, _ = run(capsys, "evaluate", "--out", out, "--force")
    assert code == 0 and (out / "report.json").read_bytes() == first


def test_errors_are_single_line(tmp_path, capsys):
    code, _, err = run(capsys, "--bogus")
    assert_error(code, err, "SEADA-E000")
    code, _, err = run(capsys, "train", "--out", tmp_path / "nothing", "--method", "CAE")
    assert_error(code, err, "SEADA-E003")
    bad = tmp_path / "bad.yaml"
    bad.write_text("schema_version: 1\nphantom: {shape: [16, 16]\n")
    code, _, err = run(capsys, "gen-data", "--config", bad, "--out", tmp_path / "x")
    assert_error(code, err, "SEADA-E001")
    code, _, err = run(capsys, "report", "--out", tmp_path / "nothing")
    assert_error(code, err, "SEADA-E003")
    code, _, err = run(capsys, "gen-data", "--config", tmp_path / "missing.yaml")
    assert_error(code, err, "SEADA-E001")
