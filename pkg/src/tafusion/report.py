"""Run manifests and CSV report writing.

A manifest id hashes everything that determines a run's outputs (command,
config, dataset digest, seeds, input checkpoints, code version) and nothing
else, so a rerun on the same inputs writes byte-identical reports.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__

MANIFEST_FILE = "run_manifest.json"


def code_version() -> str:
    """Package version plus a short hash of the installed sources."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.rglob("*.py")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def digest_files(path: Path) -> str:
    """Content hash of the files under ``path``, skipping the wall-clock run manifest."""
    h = hashlib.sha256()
    path = Path(path)
    for p in sorted(q for q in path.rglob("*") if q.is_file() and q.name != MANIFEST_FILE):
        h.update(p.relative_to(path).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config_text: str
    config: dict
    seed: int
    dataset_digest: str = ""
    inputs: dict[str, str] = field(default_factory=dict)
    version: str = field(default_factory=code_version)
    stages: dict[str, str] = field(default_factory=dict)
    started: float = field(default_factory=time.time)
    _t0: float = field(default_factory=time.perf_counter, repr=False)

    @property
    def manifest_id(self) -> str:
        key = json.dumps({"command": self.command, "config": self.config, "seed": self.seed,
                          "dataset": self.dataset_digest, "inputs": self.inputs,
                          "version": self.version}, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(key.encode()).hexdigest()[:16]

    def stage(self, name: str, status: str = "ok"):
        self.stages[name] = status

    def write(self, out_dir) -> Path:
        out = Path(out_dir) / MANIFEST_FILE
        out.parent.mkdir(parents=True, exist_ok=True)
        doc = {"manifest_id": self.manifest_id, "command": self.command, "seed": self.seed,
               "dataset_digest": self.dataset_digest, "inputs": self.inputs,
               "version": self.version, "config": self.config, "config_file": self.config_text,
               "stages": self.stages, "started_unix": self.started,
               "wall_clock_seconds": round(time.perf_counter() - self._t0, 3)}
        out.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        return out


def _fmt(x):
    return repr(float(x)) if isinstance(x, float) else x


def write_csv(path, header, rows, manifest_id: str) -> Path:
    """Rows are prefixed with the manifest id; floats keep full precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["manifest_id", *header])
        for r in rows:
            w.writerow([manifest_id, *(_fmt(x) for x in r)])
    return path


def write_json(path, doc) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path
