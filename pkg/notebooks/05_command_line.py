"""
The command-line workflow
=========================

Train, evaluate and export reliability data from one JSON config.  The same
steps run from a shell as ``metacal train --config run.json`` and so on.
"""

import json
import tempfile
from pathlib import Path

from metacal.cli import main

work = Path(tempfile.mkdtemp())
config = {
    "data": {"source": "gp", "params": {"n_tasks": 20, "n_instances": 60,
                                        "noise_shape": "skewed", "noise_std": [0.1, 0.3]}},
    "train": {"max_epochs": 20},
    "eval": {"episodes_per_task": 5},
    "output_dir": "run",
    "seed": 0,
}
(work / "run.json").write_text(json.dumps(config, indent=2))

for command in ("train", "eval", "reliability"):
    code = main([command, "--config", str(work / "run.json")])
    print(f"metacal {command} -> exit {code}")

print((work / "run" / "report.txt").read_text())
for line in (work / "run" / "reliability.jsonl").read_text().splitlines()[:5]:
    print(line)
print("outputs:", sorted(p.name for p in (work / "run").iterdir()))
