"""Atomic artifact writes, CSV emission and run manifests."""

import csv
import io
import json
import os
import tempfile
from datetime import datetime, timezone

MANIFEST = "manifest.json"


class RunDirError(ValueError):
    pass


def atomic_write(path, text):
    """Write ``text`` to ``path`` via a temp file in the same directory + rename."""
    path = os.fspath(path)
    folder = os.path.dirname(path) or "."
    os.makedirs(folder, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return str(v)


def csv_text(rows, columns):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row.get(c)) for c in columns])
    return buf.getvalue()


def dumps_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


class Run:
    """An output directory that collects artifacts and is finalized with a manifest.

    Artifacts are staged in memory and written only in ``finalize``, after all
    computation, so a failed command leaves no partial files behind.
    """

    def __init__(self, out, command, cfg, version):
        self.out = os.fspath(out)
        if os.path.exists(os.path.join(self.out, MANIFEST)):
            raise RunDirError(f"{self.out} already holds a finished run; choose a new --out")
        self.command = command
        self.cfg = cfg
        self.version = version
        self.started = _now()
        self.pending = {}

    def add_text(self, rel, text):
        self.pending[rel] = text
        return os.path.join(self.out, rel)

    def add_csv(self, rel, rows, columns):
        return self.add_text(rel, csv_text(rows, columns))

    def add_json(self, rel, obj):
        return self.add_text(rel, dumps_json(obj))

    def finalize(self):
        for rel, text in sorted(self.pending.items()):
            atomic_write(os.path.join(self.out, rel), text)
        missing = [rel for rel in self.pending if not os.path.exists(os.path.join(self.out, rel))]
        if missing:
            raise RunDirError(f"artifacts missing after write: {missing}")
        manifest = {
            "command": self.command,
            "config_hash": self.cfg.digest(),
            "seed": self.cfg.seed,
            "artifacts": sorted(self.pending),
            "started": self.started,
            "finished": _now(),
            "code_version": self.version,
        }
        atomic_write(os.path.join(self.out, MANIFEST), dumps_json(manifest))
        return manifest


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def read_manifest(run_dir):
    path = os.path.join(run_dir, MANIFEST)
    if not os.path.exists(path):
        raise FileNotFoundError(f"no manifest in {run_dir}")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
