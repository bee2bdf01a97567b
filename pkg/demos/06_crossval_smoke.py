"""
The whole pipeline in miniature
===============================

Runs leave-one-out cross-validation over three small phantom subjects with
both augmentation policies. This is the same code path as
``python -m aaaseg crossval --config configs/phantom_smoke.json``; with only
a few dozen updates per fold the numbers are not meaningful, the point is
the artifacts and the summary table.
"""
import json
import tempfile
from pathlib import Path

from aaaseg import pipeline

root = Path(__file__).resolve().parents[1]
cfg = pipeline.RunConfig.load(root / "configs" / "phantom_smoke.json")
cfg = cfg.with_overrides(train={"max_iterations": 5})

with tempfile.TemporaryDirectory() as tmp:
    manifest = pipeline.cmd_crossval(cfg, pipeline.Workspace(tmp))
    print(pipeline.format_table(manifest["rows"]))
    print("pooled:", json.dumps(manifest["pooled"], indent=1))
    print("artifacts of one fold:")
    fold = Path(tmp) / "crossval" / manifest["rows"][0]["fold"]
    for p in sorted(fold.rglob("*")):
        if p.is_file():
            print("  ", p.relative_to(tmp))
