import json
import logging

import numpy as np
import pytest

from core.errors import InputValidationError
from core.tensor import corrupt_backward
from main import create_parser, main, merge_config
from nn.eafnet import build_model
from services.checkpoint_service import checkpoint_save
from services.verification_service import CHECKS
from utils.pder import load_derived
from utils.reports import read_metrics_miou, read_train_log
from tests.conftest import RGB, tiny_config, write_sample

FAST_CHECKS = ["stokes_roundtrip", "dolp_aolp_ranges", "fresnel", "kernel_size_table",
               "aolp_flip_involution", "pder_roundtrip", "gradients_ops"]
TINY_RUN = ["--synthetic", "--synthetic-train", "4", "--synthetic-val", "2", "--epochs", "1", "--batch-size", "2",
            "--crop", "32", "--widths", "4", "4", "4", "4", "4", "--blocks-per-stage", "1", "--decoder-width", "4"]


def _verify_args(names):
    args = ["verify"]
    for name in names:
        args += ["--check", name]
    return args


def test_fast_checks_pass(capsys):
    assert main(_verify_args(FAST_CHECKS)) == 0
    out = capsys.readouterr().out
    for name in FAST_CHECKS:
        assert sum(1 for line in out.splitlines() if line.split()[1] == name) == 1
    assert "FAIL" not in out


@pytest.mark.slow
def test_full_verification_lists_every_check_once(capsys):
    assert main(["verify"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert sorted(line.split()[1] for line in lines) == sorted(CHECKS)


def test_corrupted_backward_fails_verification(capsys):
    with corrupt_backward("conv2d"):
        assert main(_verify_args(["gradients_ops"])) == 6
    assert "FAIL" in capsys.readouterr().out


def test_unknown_check_is_a_usage_error():
    assert main(["verify", "--check", "nope"]) == 2


def test_derive_writes_pder_and_previews(tmp_path, constant_dataset):
    out = tmp_path / "out"
    assert main(["--out", str(out), "derive", "--root", str(constant_dataset), "--split", "val"]) == 0
    target = out / "derived" / "val" / "a"
    assert np.all(load_derived(target / "dolp.pder") == 0)
    assert (target / "aolp.pder").is_file()
    assert (target / "aolp.png").is_file() and (target / "dolp.png").is_file()


def test_derive_missing_file_writes_nothing(tmp_path):
    planes = {n: np.full((32, 32), 0.5) for n in ("i0", "i45", "i90", "i135")}
    write_sample(tmp_path / "data", "val", "a", planes, np.zeros((32, 32), dtype=np.uint8))
    write_sample(tmp_path / "data", "val", "b", planes, np.zeros((32, 32), dtype=np.uint8), skip="i135")
    out = tmp_path / "out"
    assert main(["--out", str(out), "derive", "--root", str(tmp_path / "data")]) == 3
    assert not (out / "derived").exists()


def test_stats_from_config_file(tmp_path):
    config = tmp_path / "stats.json"
    config.write_text(json.dumps({"synthetic": True, "synthetic_val": 2, "kind": "aolp", "bins": 8,
                                  "scene": None, "scene_preset": "two_material"}))
    out = tmp_path / "out"
    assert main(["--config", str(config), "--out", str(out), "stats", "--bins", "4"]) == 0
    lines = (out / "stats_aolp.csv").read_text().splitlines()
    assert lines[0] == "bin_lo,bin_hi,count"
    assert len(lines) == 5


def test_flags_override_config_file(tmp_path):
    config = tmp_path / "c.json"
    config.write_text(json.dumps({"seed": 3, "bins": 10}))
    cfg = merge_config(create_parser().parse_args(["--config", str(config), "--seed", "11", "stats"]))
    assert (cfg.seed, cfg.bins) == (11, 10)


def test_bad_config_values_exit_2(tmp_path):
    config = tmp_path / "c.json"
    config.write_text(json.dumps({"bins": 1}))
    assert main(["--config", str(config), "stats", "--synthetic"]) == 2


@pytest.mark.parametrize("values", [
    {"train": {"epoch": 3}},
    {"train": {"epochs": 3, "lrr": 1.0}},
    {"scene": {"materials": [{"class_id": 0, "name": "desk", "refractive_index": 1.5, "base_color": [0.2, 0.2, 0.2],
                              "roughness": 0.5, "rougness": 0.1}]}},
])
def test_nested_unknown_keys_are_rejected(tmp_path, values):
    config = tmp_path / "c.json"
    config.write_text(json.dumps(values))
    with pytest.raises(InputValidationError):
        merge_config(create_parser().parse_args(["--config", str(config), "stats"]))
    assert main(["--config", str(config), "stats", "--synthetic"]) == 2


def test_effective_config_is_logged_at_info(caplog):
    caplog.set_level(logging.INFO, logger="polarseg")
    assert main(["--seed", "13", "verify", "--check", "kernel_size_table"]) == 0
    echoed = [r for r in caplog.records if r.getMessage().startswith("Effective config")]
    assert len(echoed) == 1
    assert echoed[0].levelno == logging.INFO
    assert '"seed":13' in echoed[0].getMessage()


def test_attention_on_baseline_checkpoint_fails(tmp_path):
    path = checkpoint_save(build_model(tiny_config(branches=(RGB,))), tmp_path / "baseline.eafc")
    out = tmp_path / "out"
    code = main(["--out", str(out), "attn", "--checkpoint", str(path), "--synthetic", "--synthetic-val", "1",
                 "--schema", "lost-and-found"])
    assert code != 0
    assert not (out / "attention").exists()


def test_run_is_deterministic_and_eval_reproduces(tmp_path):
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert main(["--seed", "7", "--out", str(out), "run", "AoLP-EX"] + TINY_RUN) == 0
    for name in ("metrics.csv", "train_log.csv", "last.eafc"):
        assert (outs[0] / "aolp-ex" / name).read_bytes() == (outs[1] / "aolp-ex" / name).read_bytes()

    logged = read_train_log(outs[0] / "aolp-ex" / "train_log.csv")[-1].val_miou
    checkpoint = outs[0] / "aolp-ex" / "last.eafc"
    assert main(["--seed", "7", "--out", str(tmp_path / "e"), "eval", "--checkpoint", str(checkpoint),
                 "--synthetic", "--synthetic-val", "2"]) == 0
    assert read_metrics_miou(tmp_path / "e" / "eval" / "metrics.csv") == logged

    assert main(["--seed", "7", "--out", str(tmp_path / "i"), "infer", "--checkpoint", str(checkpoint),
                 "--synthetic", "--synthetic-val", "2"]) == 0
    assert sorted(p.name for p in (tmp_path / "i" / "infer" / "val").iterdir()) == ["val0000.png", "val0001.png"]

    assert main(["--seed", "7", "--out", str(tmp_path / "t"), "attn", "--checkpoint", str(checkpoint),
                 "--synthetic", "--synthetic-val", "2"]) == 0
    assert (tmp_path / "t" / "attention" / "attention_curves.png").is_file()


def test_synth_exports_dataset(tmp_path):
    root = tmp_path / "data"
    assert main(["synth", "--root", str(root), "--synthetic-train", "2", "--synthetic-val", "1"]) == 0
    assert sorted(p.name for p in (root / "train").iterdir()) == ["train0000", "train0001"]
    assert (root / "val" / "val0000" / "i135.png").is_file()
