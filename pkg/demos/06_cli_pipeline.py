"""
Driving everything through the command line
===========================================

The library ships a CLI with four subcommands: gen-data, train, sample,
and eval. This script drives a full (heavily scaled-down) run through the
same entry point the shell would use, showing the config file format, the
pipeline-order guard, and the deterministic outputs.

Exit codes: 0 ok, 2 usage, 3 pipeline-order, 4 numerical failure.
"""

import json
import tempfile
from pathlib import Path

from cflab import cli, scenes

root = Path(tempfile.mkdtemp(prefix="cflab_cli_"))
cfg = root / "run.toml"
cfg.write_text(
    f"""
seed = 11
scale = 0.002
height = 32
width = 32
corpus_dir = "{root / 'corpus'}"
checkpoint_dir = "{root / 'ckpt'}"
report_dir = "{root / 'reports'}"
pretext_steps = 30
warmup_steps = 30
cycleflow_steps = 15
batch_size = 8
eval_scenes = 3
nfe = 4
"""
)


def run(*args):
    print(f"$ cflab {' '.join(args)}")
    code = cli.main(list(args))
    print(f"  -> exit {code}")
    return code


# the pipeline-order guard fires if phases run out of order
assert run("train", "--config", str(cfg), "--phase", "cycleflow") == 3

assert run("gen-data", "--config", str(cfg)) == 0
for phase in ("pretext", "warmup-removal", "warmup-insertion", "cycleflow"):
    assert run("train", "--config", str(cfg), "--phase", phase) == 0

corpus = root / "corpus" / "paired_test"
rec = scenes.read_manifest(corpus)[0]
image = corpus / rec["paths"]["image"]
mask = corpus / rec["paths"]["mask"]
assert run(
    "sample", "--config", str(cfg), "--task", "remove",
    "--image", str(image), "--mask", str(mask),
    "--out", str(root / "out" / "removed.ppm"), "--nfe", "4",
) == 0

# insertion without an object image is a usage error
assert run(
    "sample", "--config", str(cfg), "--task", "insert",
    "--image", str(image), "--mask", str(mask),
    "--out", str(root / "out" / "inserted.ppm"),
) == 2

# score the raw scene images as if they were removal results
manifest = root / "results.jsonl"
lines = []
for rec in scenes.read_manifest(corpus):
    lines.append(json.dumps({
        "id": rec["id"],
        "result": str(corpus / rec["paths"]["image"]),
        "mask": str(corpus / rec["paths"]["mask"]),
    }))
manifest.write_text("\n".join(lines) + "\n")
assert run("eval", "--config", str(cfg), "--suite", "cfd", "--results", str(manifest)) == 0
print((root / "reports" / "cfd_summary.json").read_text().strip())
print(f"artifacts under {root}")
