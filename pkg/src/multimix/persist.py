"""CSV, manifest and checksum helpers shared by the CLI and scripts.

Floats are written with 17 significant digits, '.' decimals and '\\n' line
endings so that identical runs give byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import platform
from pathlib import Path

import numpy as np


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="\n", encoding="utf-8") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(fmt(v) for v in row) + "\n")


def read_csv(path) -> list[dict[str, str]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split(",")
    return [dict(zip(header, line.split(","))) for line in lines[1:]]


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def versions() -> dict[str, str]:
    import scipy

    from multimix import __version__
    return {"multimix": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


class Manifest:
    """manifest.json written when a run starts and rewritten with checksums when it ends."""

    def __init__(self, out_dir, command: str, config: dict):
        self.path = Path(out_dir) / "manifest.json"
        self.data = {"command": command, "config": config, "status": "running",
                     "versions": versions(), "timings": {}, "artifacts": {}}
        self.write()

    def write(self):
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def time(self, name: str, seconds: float):
        self.data["timings"][name] = round(seconds, 3)

    def finalize(self, status="ok"):
        out = self.path.parent
        self.data["artifacts"] = {p.name: sha256(p) for p in sorted(out.iterdir())
                                  if p.is_file() and p != self.path}
        self.data["status"] = status
        self.write()
