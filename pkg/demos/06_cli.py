"""Drive the command line: train, evaluate, export; then check determinism."""

from __future__ import annotations

import tempfile
from pathlib import Path

from atsc_marl.evalcli import cli, read_series

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    args = ["train", "--algo", "ia2c", "--grid", "2x2", "--ts", "600", "--batch", "20",
            "--scenario", "120/300", "--episodes", "3", "--quiet"]
    for run in ("a", "b"):
        assert cli(args + ["--out", str(tmp / run)]) == 0
    for f in ("record.json", "checkpoint.bin"):
        same = (tmp / "a" / f).read_bytes() == (tmp / "b" / f).read_bytes()
        print(f, "identical" if same else "differs")

    cli(["eval", "--checkpoint", str(tmp / "a" / "checkpoint.bin"), "--seeds", "42,122",
         "--report", str(tmp / "report.json")])
    cli(["export", "--record", str(tmp / "a" / "record.json"), "--series", "queue",
         "--out", str(tmp / "queue.csv")])
    cols, rows = read_series(tmp / "queue.csv")
    print(cols, rows)
