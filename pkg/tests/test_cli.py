"""Config handling, stage outputs, exit codes, and the end-to-end pipeline."""

import json
from pathlib import Path

import numpy as np
import pytest

from sweep4d import breath, volume
from sweep4d.cli import (
    DEFAULT_CONFIG,
    config_hash,
    load_config,
    main,
    run_phantom,
    run_pipeline,
    run_pseudolabel,
)
from sweep4d.errors import ConfigError

SMOKE = Path(__file__).resolve().parent.parent / "configs" / "smoke.json"


def smoke_config(**overrides):
    cfg = load_config(SMOKE)
    for key, sub in overrides.items():
        cfg[key].update(sub) if isinstance(sub, dict) else cfg.update({key: sub})
    return cfg


class TestConfig:
    def test_defaults_when_no_file(self):
        assert load_config(None) == DEFAULT_CONFIG

    def test_merge_preserves_unrelated_defaults(self):
        cfg = load_config(SMOKE)
        assert cfg["phantom"]["dims"] == [24, 24, 48]
        assert cfg["phantom"]["acquisition"]["slice_time_s"] == 0.490
        assert cfg["recon"]["tv_weights"] == [0.01, 0.01, 0.1]

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"phantom": {"shape": "banana"}}))
        with pytest.raises(ConfigError, match="shape"):
            load_config(p)

    def test_invalid_json_rejected(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{nope")
        with pytest.raises(ConfigError, match="JSON"):
            load_config(p)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "absent.json")

    def test_hash_is_order_insensitive_and_sensitive_to_values(self):
        a = {"x": 1, "y": {"z": 2}}
        b = {"y": {"z": 2}, "x": 1}
        assert config_hash(a) == config_hash(b)
        assert config_hash(a) != config_hash({"x": 1, "y": {"z": 3}})


class TestExitCodes:
    def test_bad_config_exits_2(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"bogus_section": {}}))
        assert main(["--config", str(p), "phantom",
                     "--out", str(tmp_path / "o")]) == 2

    def test_missing_checkpoint_exits_3(self, tmp_path):
        assert main(["predict", "--stack", "x", "--checkpoint",
                     str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 3

    def test_missing_stack_exits_3(self, tmp_path):
        assert main(["--config", str(SMOKE), "pseudolabel",
                     "--stack", str(tmp_path / "none"),
                     "--out", str(tmp_path / "o")]) == 3


class TestPhantomStage:
    def test_writes_dataset_and_provenance(self, tmp_path):
        cfg = smoke_config()
        out = run_phantom(cfg, tmp_path)
        assert out["T"] == 120
        stack = volume.read_stack(tmp_path / "stack")
        assert stack.T == 120
        gt = breath.read_labels(tmp_path / "gt.labels.json")
        assert gt.num_states == 3 and gt.T == 120
        for state in range(3):
            assert (tmp_path / f"gt_state_{state}.f32").exists()
        prov = json.loads((tmp_path / "provenance.json").read_text())
        assert prov["tool"] == "sweep4d"
        assert prov["config_hash"] == config_hash(cfg)
        assert json.loads((tmp_path / "effective_config.json").read_text()) == cfg

    def test_seed_changes_data(self, tmp_path):
        run_phantom(smoke_config(seed=0), tmp_path / "a")
        run_phantom(smoke_config(seed=1), tmp_path / "b")
        a = volume.read_stack(tmp_path / "a" / "stack")
        b = volume.read_stack(tmp_path / "b" / "stack")
        assert not np.array_equal(a.data, b.data)

    def test_cli_seed_override(self, tmp_path):
        assert main(["--config", str(SMOKE), "--seed", "7", "phantom",
                     "--out", str(tmp_path)]) == 0
        prov = json.loads((tmp_path / "provenance.json").read_text())
        assert prov["seed"] == 7


class TestPseudolabelStage:
    def test_labels_series_and_diagnostics(self, tmp_path):
        cfg = smoke_config()
        run_phantom(cfg, tmp_path / "phantom")
        out = run_pseudolabel(cfg, tmp_path / "phantom" / "stack",
                              tmp_path / "signal")
        lab = breath.read_labels(out["labels"])
        assert lab.T == 120 and lab.source == "pseudo"
        assert (tmp_path / "signal" / "ncc.csv").exists()
        diag = json.loads((tmp_path / "signal" / "signal.json").read_text())
        assert diag["n_peaks"] >= 5
        assert diag["reference_sigma"] > 0


class TestPipeline:
    def test_end_to_end_smoke(self, tmp_path):
        summary = run_pipeline(smoke_config(), tmp_path)
        assert set(summary) == {"phantom", "pseudolabel", "train", "predict",
                                "reconstruct", "evaluate"}
        # classifier beats chance on the smoke phantom
        assert summary["evaluate"]["accuracy_srnn"] > 0.4
        # at least one state reconstructed with fidelity metrics attached
        fidelity = summary["evaluate"]["fidelity"]
        assert len(fidelity) >= 1
        for entry in fidelity.values():
            assert entry["ssim"] > 0.5
        manifest = json.loads(
            (tmp_path / "recon" / "manifest.json").read_text())
        ok_states = [s for s, e in manifest["states"].items()
                     if e["status"] == "ok"]
        assert ok_states
        for s in ok_states:
            assert (tmp_path / "recon" / f"state_{s}.f32").exists()
        assert (tmp_path / "eval" / "classification.csv").exists()
        assert (tmp_path / "eval" / "fidelity.csv").exists()

    def test_bad_recon_labels_choice(self, tmp_path):
        cfg = smoke_config()
        cfg["recon"]["labels"] = "handwritten"
        with pytest.raises(ConfigError):
            run_pipeline(cfg, tmp_path)
