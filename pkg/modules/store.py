"""Run directory persistence: results store, manifest, lock file.

Everything is line-oriented or plain JSON so runs diff cleanly and resume
without any service.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from collections import Counter, defaultdict
from datetime import datetime, timezone
from pathlib import Path

from modules.codebook import LabelVector
from modules.errors import ConfigError, DataError, EmptyStoreError, RunLockedError

logger = logging.getLogger(__name__)

STATUSES = ("pending", "classified", "failed")


def file_sha256(path) -> str | None:
    path = Path(path) if path else None
    if path is None or not path.exists():
        return None
    h = hashlib.sha256()
    with path.open("rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _utcnow() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _atomic_write(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


class ResultsStore:
    """Append-only JSON lines keyed by (label, run, post_id); the last record per key wins."""

    def __init__(self, path):
        self.path = Path(path)

    def repair(self) -> int:
        """Drop a torn trailing line left by an interrupted write; returns bytes removed."""
        if not self.path.exists():
            return 0
        data = self.path.read_bytes()
        if not data or data.endswith(b"\n"):
            return 0
        keep = data.rfind(b"\n") + 1
        with self.path.open("r+b") as f:
            f.truncate(keep)
        logger.warning("repaired torn trailing line in %s (%d bytes)", self.path, len(data) - keep)
        return len(data) - keep

    def append(self, record: dict):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")

    def records(self) -> list[dict]:
        if not self.path.exists():
            return []
        final = {}
        for n, line in enumerate(self.path.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                raise DataError(f"{self.path}: line {n} is not valid JSON") from None
            final[(rec["label"], rec["run"], rec["post_id"])] = rec
        return list(final.values())

    def keys(self) -> set[tuple[str, int, str]]:
        return {(r["label"], r["run"], r["post_id"]) for r in self.records()}

    @property
    def labels(self) -> list[str]:
        return sorted({r["label"] for r in self.records()})

    def predictions(self, alphabet):
        """``({label: {run: {post_id: LabelVector}}}, {label: {run: set(failed ids)}})``."""
        records = self.records()
        if not records:
            raise EmptyStoreError(f"results store {self.path} is empty")
        preds = defaultdict(lambda: defaultdict(dict))
        failed = defaultdict(lambda: defaultdict(set))
        for r in records:
            if r["status"] == "classified":
                preds[r["label"]][r["run"]][r["post_id"]] = LabelVector.from_mapping(r["labels"], alphabet)
            else:
                failed[r["label"]][r["run"]].add(r["post_id"])
                preds[r["label"]][r["run"]]
        return preds, failed


class RunManifest:
    """Frozen run description plus a per-post status ledger.

    Only the ledger and the end timestamp change after creation.
    """

    def __init__(self, path, data: dict):
        self.path = Path(path)
        self.data = data

    @classmethod
    def create(cls, path, config: dict, hashes: dict, tool_version: str, combos, post_ids) -> RunManifest:
        ledger = {combo: {pid: "pending" for pid in post_ids} for combo in combos}
        data = {
            "tool_version": tool_version,
            "config": config,
            "hashes": hashes,
            "started_at": _utcnow(),
            "ended_at": None,
            "post_order": list(post_ids),
            "ledger": ledger,
        }
        manifest = cls(path, data)
        manifest.flush()
        return manifest

    @classmethod
    def load(cls, path) -> RunManifest:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"no run manifest at {path}")
        return cls(path, json.loads(path.read_text(encoding="utf-8")))

    def check_frozen(self, config: dict, hashes: dict):
        """Resuming requires the same configuration and inputs."""
        if self.data["config"] != config:
            raise ConfigError(f"{self.path}: configuration differs from the manifest; use a fresh output dir")
        changed = [k for k, v in hashes.items() if self.data["hashes"].get(k) != v]
        if changed:
            raise ConfigError(f"{self.path}: input(s) changed since the run started: {', '.join(sorted(changed))}")

    @property
    def ledger(self) -> dict[str, dict[str, str]]:
        return self.data["ledger"]

    def set_status(self, combo: str, post_id: str, status: str):
        if status not in STATUSES:
            raise ValueError(f"unknown ledger status {status!r}")
        self.ledger[combo][post_id] = status

    def pending(self, combo: str) -> list[str]:
        """Pending post ids in corpus order (the ledger itself is key-sorted on disk)."""
        statuses = self.ledger[combo]
        order = self.data.get("post_order") or list(statuses)
        return [pid for pid in order if statuses.get(pid) == "pending"]

    def counts(self, combo: str | None = None) -> dict[str, int]:
        combos = [combo] if combo else list(self.ledger)
        tally = Counter(s for c in combos for s in self.ledger[c].values())
        return {s: tally.get(s, 0) for s in STATUSES}

    def finish(self):
        self.data["ended_at"] = _utcnow()
        self.flush()

    def flush(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        _atomic_write(self.path, json.dumps(self.data, indent=2, sort_keys=True) + "\n")


def pid_alive(pid: int) -> bool:
    if pid <= 0:
        return False
    if os.name == "nt":
        # signal 0 terminates the target on Windows
        return True
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


class RunLock:
    """Exclusive ownership of a run directory for one process."""

    def __init__(self, run_dir):
        self.path = Path(run_dir) / ".lock"
        self._held = False

    def _owner(self) -> int | None:
        try:
            return int(self.path.read_text(encoding="utf-8").strip())
        except (FileNotFoundError, ValueError):
            return None

    def acquire(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            owner = self._owner()
            if owner is not None and not pid_alive(owner):
                logger.warning("taking over stale lock %s left by pid %d", self.path, owner)
                self.path.unlink(missing_ok=True)
                return self.acquire()
            raise RunLockedError(
                f"{self.path.parent} is locked by pid {owner or 'unknown'}; remove {self.path} if stale"
            ) from None
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))
        self._held = True

    def release(self):
        if self._held:
            self.path.unlink(missing_ok=True)
            self._held = False

    def __enter__(self):
        self.acquire()
        return self

    def __exit__(self, *exc):
        self.release()
