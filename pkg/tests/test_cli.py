import json

import numpy as np
import pytest

import esprune as ep
from esprune.cli import main


def run_cli(args):
    return main(list(args))


PRUNE_ARGS = ["prune", "--arch", "tiny_cnn", "--synthetic", "6,20,12",
              "--lambda", "3", "--generations", "2", "--e-eval", "1", "--e-fine", "1",
              "--pretrain-epochs", "2", "--subset-per-class", "4", "--seed", "5"]


class TestFlops:
    def test_vgg16_total_matches_published_value(self, capsys):
        assert run_cli(["flops", "vgg16", "--json"]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert abs(doc["total"] - 3.15e8) / 3.15e8 < 0.05

    def test_tiny_cnn_total_is_deterministic(self, capsys):
        assert run_cli(["flops", "tiny_cnn", "--json"]) == 0
        first = json.loads(capsys.readouterr().out)["total"]
        assert run_cli(["flops", "tiny_cnn", "--json"]) == 0
        assert json.loads(capsys.readouterr().out)["total"] == first

    def test_human_readable_lists_every_layer(self, capsys):
        assert run_cli(["flops", "tiny_resnet"]) == 0
        out = capsys.readouterr().out
        assert "total" in out and "s1b1_conv1" in out

    def test_broken_arch_file_fails_with_diagnostic(self, tmp_path, capsys):
        bad = tmp_path / "broken.arch"
        bad.write_text("{this is not json")
        assert run_cli(["flops", str(bad)]) == 1
        assert "error:" in capsys.readouterr().err

    def test_shape_invalid_arch_file_reports_layer(self, tmp_path, capsys):
        arch = ep.build_preset("tiny_resnet")
        doc = ep.arch.arch_to_dict(arch)
        for rec in doc["layers"]:  # break a stride so the shortcut mismatches
            if rec["id"] == "s2b1_conv1":
                rec["stride"] = 1
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps(doc))
        assert run_cli(["flops", str(bad)]) == 1
        assert "s2b1_add" in capsys.readouterr().err


class TestPrune:
    @pytest.fixture(scope="class")
    def run_dir(self, tmp_path_factory):
        out = tmp_path_factory.mktemp("cli") / "run"
        assert run_cli(PRUNE_ARGS + ["--out", str(out)]) == 0
        return out

    def test_writes_exactly_the_contracted_artifacts(self, run_dir):
        names = sorted(p.name for p in run_dir.iterdir())
        assert names == ["heavy", "knee", "light", "run_manifest.json",
                         "summary.csv", "trace.csv"]
        for role in ("knee", "heavy", "light"):
            files = sorted(p.name for p in (run_dir / role).iterdir())
            assert files == ["arch.json", "genome.json", "manifest.json",
                             "meta.json", "weights.bin"]

    def test_manifest_reproduces_the_configuration(self, run_dir):
        doc = json.loads((run_dir / "run_manifest.json").read_text())
        assert doc["config"]["lambda_size"] == 3
        assert doc["config"]["seed"] == 5
        assert doc["dataset"]["kind"] == "synthetic"
        assert "started" in doc and "finished" in doc

    def test_summary_matches_meta_files(self, run_dir):
        lines = (run_dir / "summary.csv").read_text().strip().splitlines()
        assert lines[0] == "solution,f1,flops,percent_pruned"
        rows = {l.split(",")[0]: l.split(",") for l in lines[1:]}
        for role in ("knee", "heavy", "light"):
            meta = json.loads((run_dir / role / "meta.json").read_text())
            assert int(rows[role][2]) == meta["f2"]
            assert meta["percent_pruned"] == pytest.approx(
                100.0 * (1 - meta["f2"] / meta["base_flops"]))

    def test_single_generation_trace_has_two_selection_rounds(self, tmp_path):
        out = tmp_path / "single"
        args = list(PRUNE_ARGS)
        args[args.index("--lambda") + 1] = "1"
        args[args.index("--generations") + 1] = "1"
        assert run_cli(args + ["--out", str(out)]) == 0
        rows = ep.read_trace(out / "trace.csv")
        assert {r.generation for r in rows} == {0, 1}
        assert sum(r.generation == 0 for r in rows) == 4  # the initial 3+lambda
        assert any(r.generation == 1 and r.parent is not None for r in rows)

    def test_same_seed_twice_gives_byte_identical_traces(self, run_dir, tmp_path):
        out = tmp_path / "again"
        assert run_cli(PRUNE_ARGS + ["--out", str(out)]) == 0
        assert (out / "trace.csv").read_bytes() == (run_dir / "trace.csv").read_bytes()
        for role in ("knee", "heavy", "light"):
            assert (out / role / "genome.json").read_bytes() == \
                   (run_dir / role / "genome.json").read_bytes()

    def test_output_root_env_var(self, tmp_path, monkeypatch):
        monkeypatch.setenv("ESPRUNE_OUT_ROOT", str(tmp_path))
        args = list(PRUNE_ARGS)
        args[args.index("--generations") + 1] = "1"
        assert run_cli(args + ["--out", "nested/run"]) == 0
        assert (tmp_path / "nested" / "run" / "summary.csv").exists()

    def test_missing_data_flag_is_a_usage_error(self):
        with pytest.raises(SystemExit):
            run_cli(["prune", "--arch", "tiny_cnn"])

    def test_arch_file_with_wrong_classes_fails(self, tmp_path, capsys):
        path = tmp_path / "arch.json"
        ep.save_arch(ep.build_preset("tiny_cnn", num_classes=3,
                                     input_shape=(3, 12, 12)), path)
        args = list(PRUNE_ARGS)
        args[args.index("--arch") + 1] = str(path)
        assert run_cli(args + ["--out", str(tmp_path / "x")]) == 1
        assert "classes" in capsys.readouterr().err


class TestInspect:
    @pytest.fixture(scope="class")
    def run_dir(self, tmp_path_factory):
        out = tmp_path_factory.mktemp("cli-inspect") / "run"
        assert run_cli(PRUNE_ARGS + ["--out", str(out)]) == 0
        return out

    def test_reports_are_self_consistent(self, run_dir, capsys):
        assert run_cli(["inspect", str(run_dir / "knee")]) == 0
        out = capsys.readouterr().out
        meta = json.loads((run_dir / "knee" / "meta.json").read_text())
        expect = 100.0 * (1 - meta["f2"] / meta["base_flops"])
        assert f"{expect:.2f}% pruned" in out
        assert "surviving filters" in out

    def test_survivors_never_exceed_base_widths(self, run_dir):
        base = ep.build_preset("tiny_cnn", num_classes=6, input_shape=(3, 12, 12))
        heavy = ep.load_arch(run_dir / "heavy" / "arch.json")
        for layer in heavy.conv_layers():
            assert layer.filters <= base.layer(layer.id).filters

    def test_tampered_weights_are_rejected(self, run_dir, capsys):
        blob_path = run_dir / "light" / "weights.bin"
        blob = bytearray(blob_path.read_bytes())
        blob[7] ^= 0x01
        blob_path.write_bytes(bytes(blob))
        assert run_cli(["inspect", str(run_dir / "light")]) == 1
        assert "checksum" in capsys.readouterr().err

    def test_missing_manifest_is_an_error(self, tmp_path, capsys):
        assert run_cli(["inspect", str(tmp_path)]) == 1
        assert "meta.json" in capsys.readouterr().err
