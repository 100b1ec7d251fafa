"""The full offline methodology, end to end, at reduced scale.

Drives the same pipeline as the `fooloc` command line: synthesize the three
dataset roles, train a victim, run white-box / transfer / baseline attacks,
and emit reports. The reduced world finishes in a couple of minutes; drop
the overrides (plain `fooloc all --out runs/full`) for the desk-scale run.
"""

import json
import tempfile
from pathlib import Path

from fooloc.cli import parse_config, run_pipeline

out = Path(tempfile.mkdtemp(prefix="fooloc_demo_"))

overrides = [
    "grid.spacing=3.0",
    "grid.counts=[3,3]",
    "grid.samples_per_spot=40",
    "channel.k_subcarriers=24",
    "train.epochs=6",
    'train.architectures=["dnn_a"]',
    "attack.iterations=120",
    'attack.transfer_substitute="dnn_a"',
    "baseline.repeats=3",
]
cfg = parse_config(overrides=overrides, seed=11, output_dir=out)
print(f"running all stages into {out} (config hash {cfg.stamp})")
run_pipeline(cfg, "all")

summary = json.loads((out / f"summary.{cfg.stamp}.json").read_text())
print("\nconsolidated summary:")
for name, body in summary["reports"].items():
    asr_after = body.get("asr_after_mean")
    psr = body.get("psr_db_mean")
    if asr_after is not None:
        print(f"  {name:36s} rows={body['rows']:3d} ASR {body.get('asr_before_mean', 0):.3f}"
              f" -> {asr_after:.3f}  PSR {psr:.1f} dB")
    else:
        print(f"  {name:36s} rows={body['rows']}")

print("\nartifacts on disk:")
for path in sorted(out.iterdir()):
    print(f"  {path.name}")
