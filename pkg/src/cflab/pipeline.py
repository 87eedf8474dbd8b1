"""End-to-end orchestration: corpus generation, phase training, evaluation.

This is the layer the command-line front end dispatches into; tests drive
it directly. Every entry point is a pure function of (config, disk state),
with all randomness drawn from the config's named seed streams.
"""

from __future__ import annotations

import json
import statistics
from pathlib import Path

import numpy as np

from . import cfd as cfd_mod
from . import editor, maskops, metrics, ppm, scenes
from .config import PHASES, RunConfig
from .errors import ConfigError, MetricError, PipelineOrderError

GAMMA_SWEEP = (0.0, 1.5, 3.0)
NFE_SWEEP = (1, 4, 18, 28)


def _aug_cfg(cfg: RunConfig) -> maskops.AugmentConfig:
    return maskops.AugmentConfig(
        radius_range=(cfg.aug_radius_lo, cfg.aug_radius_hi),
        jitter_amplitude=cfg.aug_jitter,
        shape_add=cfg.aug_shape_add,
        shape_remove=cfg.aug_shape_remove,
        shape_size=(cfg.aug_size_lo, cfg.aug_size_hi),
        insertion_mode=cfg.insertion_mode,
    )


def _base_spec(cfg: RunConfig) -> scenes.SceneSpec:
    return scenes.SceneSpec(height=cfg.height, width=cfg.width)


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def corpus_path(cfg: RunConfig, split) -> Path:
    return Path(cfg.corpus_dir) / split


def run_gen_data(cfg: RunConfig) -> dict:
    """Generate the three corpora; rerunning rewrites identical bytes."""
    sizes = cfg.split_sizes()
    base = _base_spec(cfg)
    out = {}
    for k, split in enumerate(("paired_train", "paired_test", "unpaired_train")):
        mode = "unpaired" if split.startswith("unpaired") else "paired"
        seed = cfg.child_seed("data", k)
        scenes.gen_corpus(sizes[split], base, mode, seed, corpus_path(cfg, split))
        out[split] = {
            "n": sizes[split],
            "manifest_hash": scenes.manifest_hash(corpus_path(cfg, split)),
        }
    return out


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def checkpoint_path(cfg: RunConfig, phase, gamma=None) -> Path:
    name = phase if gamma is None else f"{phase}_gamma{gamma:g}"
    return Path(cfg.checkpoint_dir) / f"{name}.ckpt"


def _require(path: Path, missing_phase):
    if not path.exists():
        raise PipelineOrderError(
            f"missing prerequisite {missing_phase!r}: {path} not found",
            missing_phase=missing_phase,
        )


def _load_phase_state(cfg: RunConfig, phase):
    """State to start a phase from, honoring the pipeline order."""
    if phase == "pretext":
        _require(corpus_path(cfg, "paired_train") / "manifest.jsonl", "gen-data")
        init_seed = cfg.child_seed("init")
        state = editor.build_adapter_state(
            patch=cfg.patch,
            token_dim=cfg.token_dim,
            hidden=tuple(cfg.hidden),
            rank=cfg.lora_rank,
            alpha=cfg.lora_alpha,
            nonlin=cfg.nonlin,
            seed=init_seed,
        )
        return state
    if phase in ("warmup_removal", "warmup_insertion"):
        pre = checkpoint_path(cfg, "pretext")
        _require(pre, "pretext")
        state, _, _ = editor.load_state(pre)
        return state
    if phase == "cycleflow":
        rem = checkpoint_path(cfg, "warmup_removal")
        ins = checkpoint_path(cfg, "warmup_insertion")
        _require(rem, "warmup_removal")
        _require(ins, "warmup_insertion")
        state, _, _ = editor.load_state(ins)
        rem_state, _, _ = editor.load_state(rem)
        state.lora_phi = rem_state.lora_phi
        state.tau_removal = rem_state.tau_removal
        return state
    raise ConfigError(f"unknown phase {phase!r}")


def _phase_settings(cfg: RunConfig, phase):
    if phase == "pretext":
        return cfg.pretext_steps, cfg.pretext_lr, "paired_train"
    if phase in ("warmup_removal", "warmup_insertion"):
        return cfg.warmup_steps, cfg.warmup_lr, "paired_train"
    return cfg.cycleflow_steps, cfg.cycleflow_lr, "unpaired_train"


def run_train(cfg: RunConfig, phase, gamma=None, steps=None, ckpt_path=None) -> dict:
    """Run (or resume) one training phase and write its checkpoint."""
    if phase not in PHASES:
        raise ConfigError(f"phase must be one of {PHASES}, got {phase!r}")
    default_steps, lr, split = _phase_settings(cfg, phase)
    steps = default_steps if steps is None else int(steps)
    gamma_val = cfg.gamma if gamma is None else float(gamma)
    out_path = ckpt_path or checkpoint_path(cfg, phase, gamma if gamma is not None else None)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)

    start_step = 0
    adam = None
    if out_path.exists():
        state, adam, meta = editor.load_state(out_path)
        start_step = int(meta.get("phase_step", 0))
        if start_step >= steps:
            return {"phase": phase, "steps": start_step, "checkpoint": str(out_path), "resumed": True}
    else:
        state = _load_phase_state(cfg, phase)

    _require(corpus_path(cfg, split) / "manifest.jsonl", "gen-data")
    batcher = editor.SceneBatch(corpus_path(cfg, split))
    # logs carry wallclock, so they live beside checkpoints, not in reports
    log = editor.TrainLog(Path(cfg.checkpoint_dir) / f"train_{out_path.stem}.jsonl")
    seed = cfg.phase_seed(phase, start_step)
    common = dict(
        batcher=batcher,
        state=state,
        lr=lr,
        batch_size=cfg.batch_size,
        seed=seed,
        log=log,
        adam=adam,
        start_step=start_step,
        steps=steps,
    )
    if phase == "pretext":
        losses = editor.train_pretext(**common)
    elif phase == "warmup_removal":
        losses = editor.train_warmup(task="removal", aug_cfg=_aug_cfg(cfg), **common)
    elif phase == "warmup_insertion":
        losses = editor.train_warmup(task="insertion", aug_cfg=_aug_cfg(cfg), **common)
    else:
        losses = editor.train_cycleflow(gamma=gamma_val, aug_cfg=_aug_cfg(cfg), **common)
    log.close()
    editor.save_state(out_path, state, adam=None, extra={"phase_step": steps})
    return {
        "phase": phase,
        "steps": steps,
        "checkpoint": str(out_path),
        "final_loss": losses[-1] if losses else None,
        "resumed": start_step > 0,
    }


def load_for_task(cfg: RunConfig, task, gamma=None):
    """Pick the most advanced checkpoint that serves the task."""
    if task == "remove":
        path = checkpoint_path(cfg, "warmup_removal")
        _require(path, "warmup_removal")
        state, _, _ = editor.load_state(path)
        return state
    if task == "insert":
        for candidate in (
            checkpoint_path(cfg, "cycleflow", gamma),
            checkpoint_path(cfg, "cycleflow"),
            checkpoint_path(cfg, "warmup_insertion"),
        ):
            if candidate.exists():
                state, _, _ = editor.load_state(candidate)
                return state
        raise PipelineOrderError(
            "no insertion checkpoint found; run warmup-insertion first",
            missing_phase="warmup_insertion",
        )
    raise ConfigError(f"task must be remove or insert, got {task!r}")


# ---------------------------------------------------------------------------
# sample
# ---------------------------------------------------------------------------


def _overlay(image, mask):
    out = np.asarray(image, dtype=np.float64).copy()
    m = np.asarray(mask).astype(bool)
    tint = np.array([1.0, 0.15, 0.15])
    out[m] = 0.45 * out[m] + 0.55 * tint
    return out


def side_panel(image, mask, result) -> np.ndarray:
    """input | mask overlay | output, separated by 2px white gutters."""
    h = image.shape[0]
    gutter = np.ones((h, 2, 3))
    return np.hstack([image, gutter, _overlay(image, mask), gutter, result])


def run_sample(cfg: RunConfig, task, image_path, mask_path, out_path, object_path=None, nfe=None) -> dict:
    """Run one removal/insertion and write the result plus a panel image."""
    if task == "insert" and object_path is None:
        raise ConfigError("insert task requires an object image path")
    nfe = cfg.nfe if nfe is None else int(nfe)
    image = ppm.read_ppm(image_path)
    mask = ppm.read_mask(mask_path)
    state = load_for_task(cfg, task)
    rng = np.random.default_rng(cfg.child_seed("sample"))
    if task == "remove":
        result = editor.sample_removal(state, image, mask, nfe=nfe, rng=rng)
    else:
        reference = ppm.read_ppm(object_path)
        result = editor.sample_insertion(state, image, mask, reference, nfe=nfe, rng=rng)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    ppm.write_ppm(out_path, result)
    panel_path = out_path.with_name(out_path.stem + "_panel.ppm")
    ppm.write_ppm(panel_path, side_panel(image, mask, result))
    return {"result": str(out_path), "panel": str(panel_path), "nfe": nfe}


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------


def effect_region(spec: scenes.SceneSpec) -> np.ndarray:
    """Object-union-shadow support recomputed from the scene recipe."""
    t = scenes.render_scene(spec)
    return ((t.mask | t.shadow) > 0).astype(np.uint8)


def removal_sample_rng(cfg: RunConfig, index) -> np.random.Generator:
    return np.random.default_rng(cfg.child_seed("sample", index))


def eval_removal(cfg: RunConfig, state, records, corpus_dir, nfe, with_cfd=False) -> list[dict]:
    """Per-scene removal quality vs the mean-fill baseline on held-out scenes."""
    batcher = editor.SceneBatch(corpus_dir, records)
    rows = []
    for j in range(len(records)):
        s = batcher.sample(j)
        spec = s["spec"]
        region = effect_region(spec)
        rng = removal_sample_rng(cfg, j)
        out = editor.sample_removal(state, s["image"], s["mask"], nfe=nfe, rng=rng)
        baseline = editor.mean_fill(s["image"], s["mask"])
        row = {
            "id": records[j]["id"],
            "mae_model": metrics.region_mae(out, s["removed"], region),
            "mae_baseline": metrics.region_mae(baseline, s["removed"], region),
            "psnr": metrics.psnr(out, s["removed"]),
            "ssim": metrics.ssim(out, s["removed"]),
        }
        if with_cfd:
            row["cfd_model"] = cfd_mod.cfd_score(s["mask"], out).cfd
            row["cfd_baseline"] = cfd_mod.cfd_score(s["mask"], baseline).cfd
        rows.append(row)
    return rows


def eval_insertion_shadow(cfg: RunConfig, state, records, corpus_dir, nfe) -> list[dict]:
    """Shadow-region MAE of insertions into the object-free scene."""
    batcher = editor.SceneBatch(corpus_dir, records)
    rows = []
    for j in range(len(records)):
        s = batcher.sample(j)
        spec = s["spec"]
        rendered = scenes.render_scene(spec)
        shadow = rendered.shadow.astype(bool)
        if not shadow.any():
            continue
        m_ins = maskops.to_bbox(s["mask"])
        rng = removal_sample_rng(cfg, j)
        out = editor.sample_insertion(
            state, s["removed"], m_ins, s["reference"], nfe=nfe, rng=rng
        )
        rows.append(
            {
                "id": records[j]["id"],
                "mae_shadow": metrics.region_mae(out, s["image"], shadow),
                "mae_object": metrics.region_mae(out, s["image"], s["mask"].astype(bool)),
            }
        )
    return rows


def _summary(values: list[float]) -> dict:
    return {
        "n": len(values),
        "mean": float(np.mean(values)),
        "median": float(statistics.median(values)),
    }


def _write_jsonl(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# eval suites
# ---------------------------------------------------------------------------


def _held_out(cfg: RunConfig, limit=None):
    split = corpus_path(cfg, "paired_test")
    _require(split / "manifest.jsonl", "gen-data")
    records = scenes.read_manifest(split)
    if limit is not None:
        records = records[:limit]
    return records, split


def run_eval_cfd(cfg: RunConfig, results_manifest, out_dir=None) -> dict:
    """Score existing removal results listed in a JSONL manifest.

    Each line needs {"result": ppm, "mask": pgm} plus optional "id" and
    "segments" (a directory of precomputed segment PGMs).
    """
    entries = [
        json.loads(line)
        for line in Path(results_manifest).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    if not entries:
        raise MetricError("empty result set")
    out_dir = Path(out_dir or cfg.report_dir)
    rows = []
    for k, entry in enumerate(entries):
        image = ppm.read_ppm(entry["result"])
        mask = ppm.read_mask(entry["mask"])
        segmenter = (
            cfd_mod.PrecomputedSegmenter(entry["segments"])
            if entry.get("segments")
            else None
        )
        report = cfd_mod.cfd_score(mask, image, segmenter=segmenter)
        row = {"id": entry.get("id", str(k))}
        row.update(report.to_dict())
        rows.append(row)
    _write_jsonl(out_dir / "cfd_reports.jsonl", rows)
    summary = _summary([r["cfd"] for r in rows])
    _write_json(out_dir / "cfd_summary.json", summary)
    return summary


def run_eval_reference(cfg: RunConfig, results_manifest, out_dir=None) -> dict:
    """PSNR/SSIM/region-MAE of existing results against ground truth.

    Manifest lines: {"result": ppm, "truth": ppm, optional "id",
    optional "regions": {name: pgm path}}.
    """
    entries = [
        json.loads(line)
        for line in Path(results_manifest).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    if not entries:
        raise MetricError("empty result set")
    out_dir = Path(out_dir or cfg.report_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for k, entry in enumerate(entries):
        result = ppm.read_ppm(entry["result"])
        truth = ppm.read_ppm(entry["truth"])
        maes = {"full": metrics.region_mae(result, truth, np.ones(result.shape[:2], bool))}
        for name, mask_path in entry.get("regions", {}).items():
            maes[name] = metrics.region_mae(result, truth, ppm.read_mask(mask_path))
        rows.append(
            metrics.MetricRow(
                sample_id=entry.get("id", str(k)),
                psnr=metrics.psnr(result, truth),
                ssim=metrics.ssim(result, truth),
                maes=maes,
            )
        )
    metrics.write_rows_jsonl(out_dir / "reference_rows.jsonl", rows)
    metrics.write_rows_csv(out_dir / "reference_rows.csv", rows)
    summary = {
        "psnr": _summary([r.psnr for r in rows]),
        "ssim": _summary([r.ssim for r in rows]),
        "mae_full": _summary([r.maes["full"] for r in rows]),
    }
    _write_json(out_dir / "reference_summary.json", summary)
    return summary


def run_eval_ablation_nfe(cfg: RunConfig, out_dir=None, sweep=NFE_SWEEP, limit=None) -> list[dict]:
    """Removal region-MAE across the inference-step sweep on held-out scenes."""
    records, split = _held_out(cfg, limit or cfg.eval_scenes)
    state = load_for_task(cfg, "remove")
    out_dir = Path(out_dir or cfg.report_dir)
    summary_rows = []
    for nfe in sweep:
        rows = eval_removal(cfg, state, records, split, nfe)
        model = [r["mae_model"] for r in rows]
        base = [r["mae_baseline"] for r in rows]
        summary_rows.append(
            {
                "nfe": int(nfe),
                "mae_model": float(np.mean(model)),
                "mae_baseline": float(np.mean(base)),
                "n": len(rows),
            }
        )
    _write_jsonl(out_dir / "ablation_nfe.jsonl", summary_rows)
    return summary_rows


def run_eval_ablation_gamma(
    cfg: RunConfig, out_dir=None, sweep=GAMMA_SWEEP, steps=None, limit=None
) -> list[dict]:
    """Train the unpaired phase per gamma and compare shadow-region MAE."""
    out_dir = Path(out_dir or cfg.report_dir)
    records, split = _held_out(cfg, limit or cfg.eval_scenes)
    summary_rows = []
    for gamma in sweep:
        run_train(cfg, "cycleflow", gamma=gamma, steps=steps)
        state = load_for_task(cfg, "insert", gamma=gamma)
        rows = eval_insertion_shadow(cfg, state, records, split, cfg.nfe)
        summary_rows.append(
            {
                "gamma": float(gamma),
                "mae_shadow": float(np.mean([r["mae_shadow"] for r in rows])),
                "mae_object": float(np.mean([r["mae_object"] for r in rows])),
                "n": len(rows),
            }
        )
    _write_jsonl(out_dir / "ablation_gamma.jsonl", summary_rows)
    return summary_rows
