"""Manifest validation and CLI behavior: strict schemas, the cost-model
subcommand, deterministic reports, and byte-identical attack reruns."""

import hashlib

import numpy as np
import pytest
import yaml

from opusim.cli import main
from opusim.errors import ValidationError
from opusim.manifest import load_manifest, validate_manifest


def write_manifest(path, doc):
    path.write_text(yaml.safe_dump(doc))
    return str(path)


class TestManifestValidation:
    def test_unknown_section_rejected_by_name(self):
        with pytest.raises(ValidationError, match="frobnicate"):
            validate_manifest({"command": "train", "frobnicate": {}})

    def test_unknown_key_rejected_by_name(self):
        with pytest.raises(ValidationError, match="cheese"):
            validate_manifest({"command": "train", "train": {"cheese": 1}})

    def test_unknown_command_rejected(self):
        with pytest.raises(ValidationError, match="command"):
            validate_manifest({"command": "explode"})

    def test_defaults_filled_in(self):
        m = validate_manifest({"command": "train"})
        assert m["train"]["epochs"] == 40
        assert m["dataset"]["source"] == "digits"
        assert m.seeds["model"] == 0

    def test_idx_source_requires_paths(self):
        with pytest.raises(ValidationError, match="images"):
            validate_manifest({"command": "train",
                               "dataset": {"source": "idx"}})

    def test_bad_variant_rejected(self):
        with pytest.raises(ValidationError, match="variant"):
            validate_manifest({"command": "train",
                               "model": {"variant": "MEGA"}})

    def test_resolved_manifest_round_trips(self, tmp_path):
        m = validate_manifest({"command": "train",
                               "train": {"epochs": 3}})
        out = tmp_path / "resolved.yaml"
        m.write_resolved(out)
        again = validate_manifest(yaml.safe_load(out.read_text()))
        assert again.resolved() == m.resolved()

    def test_cost_model_value_checks(self):
        with pytest.raises(ValidationError):
            validate_manifest({"command": "cost-model",
                               "cost_model": {"err": 2.0}})


class TestCostModelCli:
    def test_prints_72_minutes_at_the_anchor(self, capsys):
        assert main(["cost-model", "N=1e4", "M=1e5", "err=0.32"]) == 0
        out = capsys.readouterr().out
        assert "72.0 minutes" in out

    def test_19_hour_anchor(self, capsys):
        assert main(["cost-model", "N=1e4", "M=1e5", "err=0.08"]) == 0
        out = capsys.readouterr().out
        assert "1152.0 minutes" in out
        assert "19.20 hours" in out

    def test_full_scale_storage(self, capsys):
        assert main(["cost-model", "N=1e6", "M=1e6", "err=0.32"]) == 0
        assert "8.000 TB" in capsys.readouterr().out

    def test_bad_pair_is_validation_error(self, capsys):
        assert main(["cost-model", "N:10"]) == 2


class TestTrainAndAttackCli:
    def small_doc(self, outdir, **attack):
        return {
            "command": "attack",
            "output_dir": str(outdir),
            "dataset": {"n_train": 350, "n_test": 120},
            "model": {"variant": "VANILLA", "hidden": 32, "defense_dim": 64},
            "train": {"epochs": 6, "lr": 0.1},
            "attack": {"name": "parsimonious", "eps": 0.15,
                       "max_queries": 400, "n_attack_samples": 6, **attack},
        }

    def test_attack_run_writes_artifacts(self, tmp_path, capsys):
        manifest = write_manifest(tmp_path / "m.yaml",
                                  self.small_doc(tmp_path / "run"))
        assert main(["attack", "--manifest", manifest]) == 0
        outdir = tmp_path / "run"
        for name in ("resolved_manifest.yaml", "fig4_csr.csv", "fig4_csr.png",
                     "outcomes.csv", "run_meta.json", "model.npz"):
            assert (outdir / name).exists(), name

    def test_rerun_is_byte_identical(self, tmp_path):
        doc = self.small_doc(tmp_path / "a")
        manifest = write_manifest(tmp_path / "m.yaml", doc)
        assert main(["attack", "--manifest", manifest]) == 0
        assert main(["attack", "--manifest", manifest,
                     "--output-dir", str(tmp_path / "b")]) == 0
        for name in ("fig4_csr.csv", "outcomes.csv", "resolved_manifest.yaml"):
            a = (tmp_path / "a" / name).read_bytes()
            b = (tmp_path / "b" / name).read_bytes()
            assert a == b, name

    def test_flag_overrides_reach_the_attack(self, tmp_path):
        manifest = write_manifest(tmp_path / "m.yaml",
                                  self.small_doc(tmp_path / "run"))
        assert main(["attack", "--manifest", manifest,
                     "--max-queries", "123"]) == 0
        resolved = yaml.safe_load(
            (tmp_path / "run" / "resolved_manifest.yaml").read_text())
        assert resolved["attack"]["max_queries"] == 123

    def test_command_mismatch_is_validation_error(self, tmp_path):
        manifest = write_manifest(tmp_path / "m.yaml",
                                  self.small_doc(tmp_path / "run"))
        assert main(["train", "--manifest", manifest]) == 2

    def test_train_writes_checkpoint_and_history(self, tmp_path):
        doc = {"command": "train", "output_dir": str(tmp_path / "t"),
               "dataset": {"n_train": 350, "n_test": 120},
               "model": {"variant": "DFA+OPU", "hidden": 32,
                         "defense_dim": 128},
               "train": {"epochs": 4, "lr": 0.1}}
        manifest = write_manifest(tmp_path / "m.yaml", doc)
        assert main(["train", "--manifest", manifest]) == 0
        outdir = tmp_path / "t"
        assert (outdir / "model.npz").exists()
        assert (outdir / "history_DFA+OPU.csv").exists()
        from opusim import load_checkpoint
        model = load_checkpoint(outdir / "model.npz")
        assert model.training_method == "hybrid-dfa"
        assert model.feedback is not None


class TestReportCli:
    def csv_fixture(self, tmp_path):
        path = tmp_path / "fig4_csr.csv"
        path.write_text("variant,queries,csr\nrun,0,0\nrun,5,0.5\nrun,100,0.5\n")
        return path

    def test_report_renders_plot(self, tmp_path):
        csv_path = self.csv_fixture(tmp_path)
        doc = {"command": "report", "output_dir": str(tmp_path / "rep"),
               "report": {"inputs": [str(csv_path)], "kind": "csr"}}
        manifest = write_manifest(tmp_path / "m.yaml", doc)
        assert main(["report", "--manifest", manifest]) == 0
        assert (tmp_path / "rep" / "fig4_csr.png").exists()

    def test_plots_regenerate_bit_identically(self, tmp_path):
        csv_path = self.csv_fixture(tmp_path)
        digests = []
        for sub in ("r1", "r2"):
            doc = {"command": "report", "output_dir": str(tmp_path / sub),
                   "report": {"inputs": [str(csv_path)], "kind": "csr"}}
            manifest = write_manifest(tmp_path / f"{sub}.yaml", doc)
            assert main(["report", "--manifest", manifest]) == 0
            png = (tmp_path / sub / "fig4_csr.png").read_bytes()
            digests.append(hashlib.sha256(png).hexdigest())
        assert digests[0] == digests[1]

    def test_empty_inputs_rejected(self, tmp_path):
        doc = {"command": "report", "output_dir": str(tmp_path / "rep"),
               "report": {"inputs": []}}
        manifest = write_manifest(tmp_path / "m.yaml", doc)
        assert main(["report", "--manifest", manifest]) == 2
