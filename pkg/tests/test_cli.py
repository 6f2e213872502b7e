"""Config parsing and CLI subcommand tests on tiny generated datasets."""

import json
from pathlib import Path

import numpy as np
import pytest

from celldistill.cli import main
from celldistill.config import (ConfigError, build_run_config,
                                parse_config_text)
from celldistill.grids import load_binary_mask, save_binary_mask
from celldistill.synth import standard_config


class TestParseConfigText:
    def test_assignments_comments_and_blanks(self):
        text = "\n".join([
            "# pipeline settings",
            "",
            "ot.lambda = 0.2",
            "distill.rounds=2",
            "  oracle.mode =  bridge  ",
        ])
        values = parse_config_text(text)
        assert values == {"ot.lambda": "0.2", "distill.rounds": "2",
                          "oracle.mode": "bridge"}

    def test_unknown_key_rejected_with_line_number(self):
        with pytest.raises(ConfigError, match=r"conf:2: unknown key 'ot\.lam'"):
            parse_config_text("ot.lambda = 0.2\not.lam = 0.3", source="conf")

    def test_line_without_assignment_rejected(self):
        with pytest.raises(ConfigError, match="expected `key = value`"):
            parse_config_text("just some words")

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError, match="duplicate key"):
            parse_config_text("seed = 1\nseed = 2")


class TestBuildRunConfig:
    def test_defaults_match_operating_point(self):
        config = build_run_config()
        assert config.rounds == 3
        assert config.epochs == 20
        assert config.lr == 0.1
        assert config.hidden == 32
        assert config.per_axis == 6
        assert config.ot_lambda == 0.1
        assert config.threshold_mode == "mean_plus_std"
        assert config.oracle_mode == "synthetic"
        assert config.synth == standard_config()

    def test_flag_override_beats_file_value(self):
        config = build_run_config({"ot.lambda": "0.2"}, {"ot.lambda": "0.45"})
        assert config.ot_lambda == 0.45

    def test_global_seed_cascades_to_module_seeds(self):
        config = build_run_config({"seed": "9"})
        assert config.seed == 9
        assert config.distill_seed == 9
        assert config.oracle_seed == 9
        assert config.synth.seed == 9

    def test_explicit_module_seed_resists_cascade(self):
        config = build_run_config({"seed": "9", "oracle.seed": "7"})
        assert config.oracle_seed == 7
        assert config.distill_seed == 9

    def test_without_global_seed_module_defaults_hold(self):
        config = build_run_config()
        assert config.oracle_seed == 7
        assert config.distill_seed == 0
        assert config.synth.seed == standard_config().seed

    def test_bad_int_rejected(self):
        with pytest.raises(ConfigError, match="distill.epochs"):
            build_run_config({"distill.epochs": "many"})

    def test_range_violation_rejected(self):
        with pytest.raises(ConfigError, match="oracle.jitter"):
            build_run_config({"oracle.jitter": "1.5"})

    def test_bad_choice_rejected(self):
        with pytest.raises(ConfigError, match="score.threshold_mode"):
            build_run_config({"score.threshold_mode": "median"})

    def test_bool_parsing_is_strict(self):
        assert build_run_config({"oracle.fail_small": "false"}) \
            .oracle_fail_small is False
        with pytest.raises(ConfigError, match="oracle.fail_small"):
            build_run_config({"oracle.fail_small": "yes"})

    def test_cross_field_synth_validation_becomes_config_error(self):
        with pytest.raises(ConfigError, match="synth"):
            build_run_config({"synth.radius_min": "5.0",
                              "synth.radius_max": "4.0"})

    def test_distill_config_carries_every_knob(self):
        config = build_run_config({
            "distill.rounds": "2", "distill.epochs": "7", "distill.lr": "0.3",
            "distill.hidden": "12", "distill.seed": "5",
            "patch.per_axis": "2", "ot.lambda": "0.05", "ot.tol": "1e-7",
            "ot.max_iter": "500", "morph.min_distance": "4",
            "morph.connectivity": "8", "morph.edge_dilate": "2.0",
            "score.threshold_mode": "std_over_mean",
            "metrics.adjacent_radius": "3.0",
            "metrics.adjacent_min_neighbors": "2",
        })
        dcfg = config.distill_config()
        assert (dcfg.rounds, dcfg.epochs, dcfg.lr, dcfg.hidden) == \
            (2, 7, 0.3, 12)
        assert (dcfg.seed, dcfg.per_axis, dcfg.lam) == (5, 2, 0.05)
        assert (dcfg.tol, dcfg.max_iter) == (1e-7, 500)
        assert (dcfg.min_distance, dcfg.connectivity, dcfg.edge_dilate) == \
            (4, 8, 2.0)
        assert dcfg.threshold_mode == "std_over_mean"
        assert (dcfg.adjacent_radius, dcfg.adjacent_min_neighbors) == (3.0, 2)


def write_config(path: Path, values: dict) -> str:
    lines = [f"{key} = {value}" for key, value in values.items()]
    path.write_text("\n".join(lines) + "\n")
    return str(path)


TINY_SYNTH = {
    "synth.seed": 3,
    "synth.train_images": 1,
    "synth.test_images": 1,
    "synth.size": 32,
    "synth.cells": 3,
    "synth.radius_min": 4.0,
    "synth.radius_max": 6.0,
    "synth.small_fraction": 0.34,
    "synth.drop": 0.25,
    "synth.drop_grid": 2,
    "synth.noise": 0.08,
    "synth.speckle_fraction": 0.02,
}

TINY_RUN = {
    "patch.per_axis": 2,
    "distill.rounds": 1,
    "distill.epochs": 4,
    "distill.hidden": 8,
}


@pytest.fixture()
def tiny_dataset(tmp_path):
    data_dir = tmp_path / "data"
    conf = write_config(tmp_path / "synth.conf",
                        {"out.dir": data_dir, **TINY_SYNTH})
    assert main(["synth", "--config", conf]) == 0
    return data_dir


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(path.relative_to(root)): path.read_bytes()
            for path in sorted(root.rglob("*")) if path.is_file()}


class TestSynthCommand:
    def test_writes_dataset_directory(self, tiny_dataset):
        manifest = json.loads((tiny_dataset / "manifest.json").read_text())
        ids = sorted(entry["id"] for entry in manifest["images"])
        assert ids == ["test_000", "train_000"]
        for image_id in ids:
            assert (tiny_dataset / f"{image_id}.features.cgf").is_file()
            assert (tiny_dataset / f"{image_id}.seed.pgm").is_file()
            assert (tiny_dataset / f"{image_id}.gt.pgm16").is_file()
        assert manifest["synth"]["seed"] == 3
        labels = manifest["fail_labels"]["train_000"]
        assert labels and all(isinstance(v, int) for v in labels)

    def test_deterministic_across_invocations(self, tmp_path):
        trees = []
        for name in ("a", "b"):
            out = tmp_path / name
            conf = write_config(tmp_path / f"{name}.conf",
                                {"out.dir": out, **TINY_SYNTH})
            assert main(["synth", "--config", conf]) == 0
            trees.append(tree_bytes(out))
        assert trees[0] == trees[1]

    def test_unknown_key_fails_before_any_output(self, tmp_path, capsys):
        out = tmp_path / "never"
        conf = tmp_path / "bad.conf"
        conf.write_text(f"out.dir = {out}\nsynth.cels = 5\n")
        assert main(["synth", "--config", str(conf)]) == 2
        assert "synth.cels" in capsys.readouterr().err
        assert not out.exists()

    def test_missing_config_file_is_config_error(self, capsys):
        assert main(["synth", "--config", "/nonexistent/x.conf"]) == 2
        assert "not found" in capsys.readouterr().err


class TestPropagateCommand:
    def test_emits_masks_and_convergence_reports(self, tiny_dataset, tmp_path):
        out = tmp_path / "out"
        conf = write_config(tmp_path / "run.conf", {
            "data.dir": tiny_dataset, "out.dir": out, **TINY_RUN})
        assert main(["propagate", "--config", conf]) == 0
        mask = load_binary_mask(out / "propagate" / "train_000.mask.pgm")
        assert mask.shape == (32, 32)
        report = json.loads(
            (out / "propagate" / "train_000.ot.json").read_text())
        assert report["converged"] is True
        assert len(report["patches"]) == 4
        assert all(p["iterations"] >= 1 for p in report["patches"])

    def test_rerun_is_byte_identical(self, tiny_dataset, tmp_path):
        out = tmp_path / "out"
        conf = write_config(tmp_path / "run.conf", {
            "data.dir": tiny_dataset, "out.dir": out, **TINY_RUN})
        assert main(["propagate", "--config", conf]) == 0
        first = tree_bytes(out)
        assert main(["propagate", "--config", conf]) == 0
        assert tree_bytes(out) == first

    def test_jobs_flag_does_not_change_outputs(self, tiny_dataset, tmp_path):
        trees = []
        for name, jobs in (("one", "1"), ("four", "4")):
            out = tmp_path / name
            conf = write_config(tmp_path / f"{name}.conf", {
                "data.dir": tiny_dataset, "out.dir": out, **TINY_RUN})
            assert main(["propagate", "--config", conf, "--jobs", jobs]) == 0
            trees.append(tree_bytes(out))
        assert trees[0] == trees[1]

    def test_missing_features_file_is_data_error(self, tiny_dataset, tmp_path,
                                                 capsys):
        (tiny_dataset / "train_000.features.cgf").unlink()
        out = tmp_path / "out"
        conf = write_config(tmp_path / "run.conf", {
            "data.dir": tiny_dataset, "out.dir": out, **TINY_RUN})
        assert main(["propagate", "--config", conf]) == 3
        assert "train_000.features.cgf" in capsys.readouterr().err

    def test_missing_data_dir_is_config_error(self, tmp_path, capsys):
        conf = write_config(tmp_path / "run.conf", {
            "data.dir": tmp_path / "nope", "out.dir": tmp_path / "out"})
        assert main(["propagate", "--config", conf]) == 2
        assert "data.dir" in capsys.readouterr().err


class TestScoreCommand:
    def test_labels_cover_every_instance(self, tiny_dataset, tmp_path):
        out = tmp_path / "out"
        conf = write_config(tmp_path / "run.conf", {
            "data.dir": tiny_dataset, "out.dir": out, **TINY_RUN})
        assert main(["score", "--config", conf]) == 0
        for image_id in ("train_000", "test_000"):
            payload = json.loads(
                (out / "score" / f"{image_id}.scored.json").read_text())
            assert set(payload) == {"instances", "threshold"}
            for item in payload["instances"]:
                assert item["label"] in (-1, 0, 1)
                assert 0.0 <= item["confidence"] <= 1.0
            assert (out / "score" / f"{image_id}.pseudo_binary.pgm").is_file()
            assert (out / "score" / f"{image_id}.pseudo_edge.pgm").is_file()

    def test_topk_flag_emits_curve_csv(self, tiny_dataset, tmp_path):
        out = tmp_path / "out"
        conf = write_config(tmp_path / "run.conf", {
            "data.dir": tiny_dataset, "out.dir": out, **TINY_RUN})
        assert main(["score", "--config", conf, "--topk-curve"]) == 0
        lines = (out / "score" / "topk.csv").read_text().splitlines()
        assert lines[0] == "image_id,k_percent,count,aji,random_aji"
        assert len(lines) > 1
        first = lines[1].split(",")
        assert first[0] in ("train_000", "test_000")
        assert int(first[1]) == 1


class TestBridgeMode:
    def test_prompts_written_and_missing_proposals_score_zero(
            self, tiny_dataset, tmp_path):
        bridge = tmp_path / "bridge"
        bridge.mkdir()
        out = tmp_path / "out"
        conf = write_config(tmp_path / "run.conf", {
            "data.dir": tiny_dataset, "out.dir": out,
            "oracle.bridge_dir": bridge, **TINY_RUN})
        assert main(["score", "--config", conf, "--oracle", "bridge"]) == 0
        prompts = json.loads((bridge / "prompts.json").read_text())
        assert prompts and set(prompts[0]) == {"image_id", "row", "col"}
        payload = json.loads(
            (out / "score" / "train_000.scored.json").read_text())
        assert all(item["confidence"] == 0.0
                   for item in payload["instances"])

    def test_answered_proposals_raise_confidence(self, tiny_dataset,
                                                 tmp_path):
        bridge = tmp_path / "bridge"
        bridge.mkdir()
        out = tmp_path / "out"
        conf = write_config(tmp_path / "run.conf", {
            "data.dir": tiny_dataset, "out.dir": out,
            "oracle.bridge_dir": bridge, **TINY_RUN})
        assert main(["score", "--config", conf, "--oracle", "bridge"]) == 0
        from celldistill.grids import load_dataset
        gt_maps = {}
        for records in load_dataset(tiny_dataset).values():
            for rec in records:
                gt_maps[rec.image_id] = rec.gt
        proposals = bridge / "proposals"
        proposals.mkdir()
        for prompt in json.loads((bridge / "prompts.json").read_text()):
            gt = gt_maps[prompt["image_id"]]
            label = gt[prompt["row"], prompt["col"]]
            answer = (gt == label).astype(np.uint8) if label > 0 else \
                np.zeros_like(gt, dtype=np.uint8)
            name = f"{prompt['image_id']}_{prompt['row']}_{prompt['col']}.pgm"
            save_binary_mask(answer, proposals / name)
        assert main(["score", "--config", conf, "--oracle", "bridge"]) == 0
        payload = json.loads(
            (out / "score" / "train_000.scored.json").read_text())
        assert any(item["confidence"] > 0.5 for item in payload["instances"])


class TestDistillAndRunCommands:
    def test_distill_writes_checkpoint_and_round_log(self, tiny_dataset,
                                                     tmp_path):
        out = tmp_path / "out"
        conf = write_config(tmp_path / "run.conf", {
            "data.dir": tiny_dataset, "out.dir": out, **TINY_RUN})
        assert main(["distill", "--config", conf]) == 0
        assert (out / "distill" / "checkpoint" / "manifest.json").is_file()
        rounds = json.loads((out / "distill" / "rounds.json").read_text())
        assert len(rounds) == 1
        assert rounds[0]["round"] == 1
        assert rounds[0]["accepted"] >= 0
        assert len(rounds[0]["loss_total"]) == 1  # one train image

    def test_run_emits_reports_predictions_checkpoint(self, tiny_dataset,
                                                      tmp_path):
        out = tmp_path / "out"
        conf = write_config(tmp_path / "run.conf", {
            "data.dir": tiny_dataset, "out.dir": out, **TINY_RUN})
        assert main(["run", "--config", conf]) == 0
        payload = json.loads((out / "reports.json").read_text())
        assert len(payload["reports"]) == 2  # baseline + 1 round
        assert len(payload["accepted"]) == 1
        overall = payload["reports"][0]["overall"]
        assert set(overall) >= {"aji", "pq", "iou", "dice", "fp", "fn"}
        assert (out / "predictions" / "test_000.pred.pgm16").is_file()
        assert (out / "checkpoint" / "manifest.json").is_file()
        assert (out / "propagate" / "train_000.mask.pgm").is_file()

    def test_run_is_byte_identical_across_invocations(self, tiny_dataset,
                                                      tmp_path):
        trees = []
        for name in ("a", "b"):
            out = tmp_path / name
            conf = write_config(tmp_path / f"{name}.conf", {
                "data.dir": tiny_dataset, "out.dir": out, **TINY_RUN})
            assert main(["run", "--config", conf]) == 0
            trees.append(tree_bytes(out))
        assert trees[0] == trees[1]


class TestEvalCommand:
    def test_perfect_predictions_score_one(self, tiny_dataset, tmp_path):
        from celldistill.grids import load_dataset, save_instance_map
        pred_dir = tmp_path / "pred"
        pred_dir.mkdir()
        for records in load_dataset(tiny_dataset).values():
            for rec in records:
                save_instance_map(rec.gt,
                                  pred_dir / f"{rec.image_id}.pred.pgm16")
        out = tmp_path / "out"
        conf = write_config(tmp_path / "run.conf", {
            "data.dir": tiny_dataset, "out.dir": out,
            "eval.pred_dir": pred_dir})
        assert main(["eval", "--config", conf]) == 0
        payload = json.loads((out / "eval.json").read_text())
        overall = payload["mean"]["overall"]
        assert overall["aji"] == 1.0
        assert overall["pq"] == 1.0
        assert overall["iou"] == 1.0
        assert overall["fp"] == 0.0 and overall["fn"] == 0.0

    def test_missing_prediction_is_data_error(self, tiny_dataset, tmp_path,
                                              capsys):
        pred_dir = tmp_path / "pred"
        pred_dir.mkdir()
        out = tmp_path / "out"
        conf = write_config(tmp_path / "run.conf", {
            "data.dir": tiny_dataset, "out.dir": out,
            "eval.pred_dir": pred_dir})
        assert main(["eval", "--config", conf]) == 3
        assert ".pred.pgm16" in capsys.readouterr().err
