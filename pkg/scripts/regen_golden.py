#!/usr/bin/env python3
"""Regenerate the golden loss-history CSV checked into tests/data.

Runs `synth` and `optimize` with the shipped example config into a temp
directory and copies the resulting loss_history.csv over the golden file.
Run via `make golden` after any intentional change to the numerics.
"""

import shutil
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO / "src"))

from sfm_losskit import cli  # noqa: E402

CONFIG = REPO / "configs" / "example_plane.cfg"
GOLDEN = REPO / "tests" / "data" / "golden_loss_history.csv"


def main() -> int:
    with tempfile.TemporaryDirectory() as tmp:
        scene_dir = Path(tmp) / "scene"
        report_dir = Path(tmp) / "report"
        rc = cli.main(["synth", "--config", str(CONFIG), "--out", str(scene_dir)])
        if rc:
            return rc
        rc = cli.main(
            ["optimize", str(scene_dir), "--config", str(CONFIG), "--out", str(report_dir)]
        )
        if rc:
            return rc
        GOLDEN.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(report_dir / "loss_history.csv", GOLDEN)
    print(f"wrote {GOLDEN}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
