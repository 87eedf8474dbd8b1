import hashlib
import json
import os
from pathlib import Path

import numpy as np
import pytest

from cflab import cli, editor, pipeline, ppm, scenes
from cflab.config import load_config, make_config
from cflab.errors import ConfigError, PipelineOrderError


def tiny_cfg(root: Path, **extra):
    values = {
        "seed": 5,
        "scale": 0.01,
        "corpus_dir": str(root / "corpus"),
        "checkpoint_dir": str(root / "ckpt"),
        "report_dir": str(root / "reports"),
        "height": 32,
        "width": 32,
        "pretext_steps": 3,
        "warmup_steps": 3,
        "cycleflow_steps": 2,
        "batch_size": 4,
        "eval_scenes": 2,
        "nfe": 2,
    }
    values.update(extra)
    return make_config(values)


def cfg_file(root: Path, cfg_path: Path, **extra) -> Path:
    from cflab.config import dump_config

    dump_config(tiny_cfg(root, **extra), cfg_path)
    return cfg_path


class TestConfig:
    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            make_config({"sneaky_typo": 1})

    def test_toml_load_and_flag_override(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text('seed = 3\ngamma = 0.5\nnonlin = "tanh"\n')
        cfg = load_config(path, {"gamma": 2.0})
        assert cfg.seed == 3
        assert cfg.gamma == 2.0
        assert cfg.nonlin == "tanh"

    def test_env_seed_wins(self, tmp_path, monkeypatch):
        path = tmp_path / "run.toml"
        path.write_text("seed = 3\n")
        monkeypatch.setenv("CFLAB_SEED", "99")
        assert load_config(path).seed == 99

    def test_scale_arithmetic(self):
        cfg = make_config({"scale": 0.01})
        assert cfg.split_sizes() == {
            "paired_train": 30,
            "paired_test": 3,
            "unpaired_train": 50,
        }

    def test_seed_streams_are_stable_and_distinct(self):
        cfg = make_config({"seed": 11})
        a = np.random.default_rng(cfg.child_seed("data", 0)).integers(0, 1 << 30)
        b = np.random.default_rng(cfg.child_seed("data", 0)).integers(0, 1 << 30)
        c = np.random.default_rng(cfg.child_seed("train", 0)).integers(0, 1 << 30)
        assert a == b
        assert a != c

    def test_validation(self):
        with pytest.raises(ConfigError):
            make_config({"gamma": -1})
        with pytest.raises(ConfigError):
            make_config({"nfe": 0})


class TestPipelineOrder:
    def test_cycleflow_requires_warmups(self, tmp_path):
        cfg = tiny_cfg(tmp_path)
        pipeline.run_gen_data(cfg)
        with pytest.raises(PipelineOrderError) as err:
            pipeline.run_train(cfg, "cycleflow")
        assert err.value.missing_phase == "warmup_removal"

    def test_warmup_requires_pretext(self, tmp_path):
        cfg = tiny_cfg(tmp_path)
        pipeline.run_gen_data(cfg)
        with pytest.raises(PipelineOrderError) as err:
            pipeline.run_train(cfg, "warmup_removal")
        assert err.value.missing_phase == "pretext"

    def test_pretext_requires_corpus(self, tmp_path):
        cfg = tiny_cfg(tmp_path)
        with pytest.raises(PipelineOrderError) as err:
            pipeline.run_train(cfg, "pretext")
        assert err.value.missing_phase == "gen-data"

    def test_resume_is_monotone_and_noop_when_done(self, tmp_path):
        cfg = tiny_cfg(tmp_path)
        pipeline.run_gen_data(cfg)
        first = pipeline.run_train(cfg, "pretext", steps=2)
        assert first["steps"] == 2 and not first["resumed"]
        again = pipeline.run_train(cfg, "pretext", steps=2)
        assert again["resumed"]
        more = pipeline.run_train(cfg, "pretext", steps=4)
        assert more["steps"] == 4 and more["resumed"]


def run_cli(args):
    return cli.main(args)


class TestCliCommands:
    def test_full_tiny_pipeline(self, tmp_path):
        cfg_path = cfg_file(tmp_path, tmp_path / "run.toml")
        base = ["--config", str(cfg_path)]
        assert run_cli(["gen-data", *base]) == 0
        for phase in ("pretext", "warmup-removal", "warmup-insertion", "cycleflow"):
            assert run_cli(["train", *base, "--phase", phase]) == 0, phase
        corpus = tmp_path / "corpus" / "paired_test"
        rec = scenes.read_manifest(corpus)[0]
        image = corpus / rec["paths"]["image"]
        mask = corpus / rec["paths"]["mask"]
        obj = corpus / rec["paths"]["reference"]
        out = tmp_path / "out" / "removed.ppm"
        assert run_cli(["sample", *base, "--task", "remove", "--image", str(image),
                        "--mask", str(mask), "--out", str(out), "--nfe", "1"]) == 0
        assert out.exists()
        assert out.with_name("removed_panel.ppm").exists()
        out2 = tmp_path / "out" / "inserted.ppm"
        assert run_cli(["sample", *base, "--task", "insert", "--image", str(image),
                        "--mask", str(mask), "--object", str(obj), "--out", str(out2)]) == 0
        assert out2.exists()

    def test_insert_without_object_is_usage_error(self, tmp_path):
        cfg_path = cfg_file(tmp_path, tmp_path / "run.toml")
        code = run_cli(["sample", "--config", str(cfg_path), "--task", "insert",
                        "--image", "x.ppm", "--mask", "m.pgm", "--out", "o.ppm"])
        assert code == cli.EXIT_USAGE

    def test_pipeline_order_exit_code(self, tmp_path):
        cfg_path = cfg_file(tmp_path, tmp_path / "run.toml")
        run_cli(["gen-data", "--config", str(cfg_path)])
        code = run_cli(["train", "--config", str(cfg_path), "--phase", "cycleflow"])
        assert code == cli.EXIT_PIPELINE

    def test_unknown_config_key_is_usage_error(self, tmp_path):
        cfg_path = tmp_path / "bad.toml"
        cfg_path.write_text("definitely_not_a_key = 1\n")
        assert run_cli(["gen-data", "--config", str(cfg_path)]) == cli.EXIT_USAGE

    def test_gen_data_rerun_identical_manifest_hash(self, tmp_path):
        cfg_path = cfg_file(tmp_path, tmp_path / "run.toml")
        assert run_cli(["gen-data", "--config", str(cfg_path)]) == 0
        h1 = scenes.manifest_hash(tmp_path / "corpus" / "paired_train")
        assert run_cli(["gen-data", "--config", str(cfg_path)]) == 0
        assert scenes.manifest_hash(tmp_path / "corpus" / "paired_train") == h1

    def test_eval_cfd_suite(self, tmp_path):
        cfg_path = cfg_file(tmp_path, tmp_path / "run.toml")
        run_cli(["gen-data", "--config", str(cfg_path)])
        corpus = tmp_path / "corpus" / "paired_test"
        records = scenes.read_manifest(corpus)
        manifest = tmp_path / "results.jsonl"
        lines = []
        for rec in records[:3]:
            lines.append(json.dumps({
                "id": rec["id"],
                "result": str(corpus / rec["paths"]["image"]),
                "mask": str(corpus / rec["paths"]["mask"]),
            }))
        manifest.write_text("\n".join(lines) + "\n")
        assert run_cli(["eval", "--config", str(cfg_path), "--suite", "cfd",
                        "--results", str(manifest)]) == 0
        reports = (tmp_path / "reports" / "cfd_reports.jsonl").read_text().splitlines()
        assert len(reports) == len(lines)
        summary = json.loads((tmp_path / "reports" / "cfd_summary.json").read_text())
        assert set(summary) == {"n", "mean", "median"}

    def test_eval_reference_suite(self, tmp_path):
        cfg_path = cfg_file(tmp_path, tmp_path / "run.toml")
        run_cli(["gen-data", "--config", str(cfg_path)])
        corpus = tmp_path / "corpus" / "paired_test"
        rec = scenes.read_manifest(corpus)[0]
        manifest = tmp_path / "results.jsonl"
        manifest.write_text(json.dumps({
            "id": rec["id"],
            "result": str(corpus / rec["paths"]["image"]),
            "truth": str(corpus / rec["paths"]["removed"]),
            "regions": {"object": str(corpus / rec["paths"]["mask"])},
        }) + "\n")
        assert run_cli(["eval", "--config", str(cfg_path), "--suite", "reference",
                        "--results", str(manifest)]) == 0
        rows = (tmp_path / "reports" / "reference_rows.jsonl").read_text().splitlines()
        row = json.loads(rows[0])
        assert {"psnr", "ssim", "mae_full", "mae_object"} <= set(row)

    def test_eval_requires_results_manifest(self, tmp_path):
        cfg_path = cfg_file(tmp_path, tmp_path / "run.toml")
        assert run_cli(["eval", "--config", str(cfg_path), "--suite", "cfd"]) == cli.EXIT_USAGE

    def test_set_overrides(self, tmp_path):
        cfg_path = cfg_file(tmp_path, tmp_path / "run.toml")
        assert run_cli(["gen-data", "--config", str(cfg_path), "--set", "scale=0.005"]) == 0
        records = scenes.read_manifest(tmp_path / "corpus" / "paired_train")
        assert len(records) == 15


def _dir_digest(root: Path) -> dict:
    out = {}
    for path in sorted(root.rglob("*")):
        if path.is_file():
            out[str(path.relative_to(root))] = hashlib.sha256(path.read_bytes()).hexdigest()
    return out


class TestDeterminism:
    def test_pipeline_rerun_byte_identical(self, tmp_path):
        digests = []
        for run in ("a", "b"):
            root = tmp_path / run
            cfg = tiny_cfg(root)
            pipeline.run_gen_data(cfg)
            for phase in ("pretext", "warmup_removal", "warmup_insertion", "cycleflow"):
                pipeline.run_train(cfg, phase)
            corpus = root / "corpus" / "paired_test"
            rec = scenes.read_manifest(corpus)[0]
            pipeline.run_sample(
                cfg, "remove",
                corpus / rec["paths"]["image"],
                corpus / rec["paths"]["mask"],
                root / "out" / "removed.ppm",
                nfe=2,
            )
            pipeline.run_eval_ablation_nfe(cfg, sweep=(1, 2), limit=2)
            ckpts = {
                k: v for k, v in _dir_digest(root / "ckpt").items() if k.endswith(".ckpt")
            }
            digests.append(
                {
                    "ckpt": ckpts,
                    "reports": _dir_digest(root / "reports"),
                    "sample": _dir_digest(root / "out"),
                }
            )
        assert digests[0] == digests[1]
