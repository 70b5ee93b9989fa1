"""Filesystem run registry and artifact store.

Layout under the store root::

    runs/<run_id>/record.json
    runs/<run_id>/artifacts/<sha256>.bin
    best/<task>.json

The best pointer is replaced atomically and only advances when the
selection metric improves.
"""
from __future__ import annotations

import contextlib
import datetime as _dt
import fcntl
import hashlib
import json
import logging
import os
import secrets
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping

log = logging.getLogger(__name__)

ARTIFACT_KINDS = ("scaler", "embedding", "label_model", "classifier", "lf_config")
STORE_ENV = "TXWEAK_STORE"
DEFAULT_METRIC = "val_balanced_accuracy"


class RunStoreError(RuntimeError):
    pass


class ParityError(RunStoreError):
    """Stored code version differs from the running one."""


class IntegrityError(RunStoreError):
    """An artifact is missing or its bytes do not match the recorded hash."""


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def code_version() -> str:
    """Content hash over the package's Python sources, in path order."""
    root = Path(__file__).resolve().parent
    h = hashlib.sha256()
    for p in sorted(root.rglob("*.py")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="microseconds")


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class TransformArtifact:
    kind: str
    state: bytes | None = None

    def __post_init__(self):
        if self.kind not in ARTIFACT_KINDS:
            raise ValueError(f"unknown artifact kind {self.kind!r}")

    @property
    def fitted(self) -> bool:
        return self.state is not None

    def payload(self) -> bytes:
        if self.state is None:
            raise RunStoreError(f"{self.kind} artifact is not fitted")
        return self.state


@dataclass
class ArtifactRef:
    name: str
    kind: str
    sha256: str
    path: str


@dataclass
class RunRecord:
    run_id: str
    task: str
    config: Any
    code_version: str
    status: str = "started"
    started_at: str = ""
    ended_at: str | None = None
    metrics: dict[str, float] = field(default_factory=dict)
    artifacts: list[ArtifactRef] = field(default_factory=list)
    error: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunRecord":
        d = dict(d)
        d["artifacts"] = [ArtifactRef(**a) for a in d.get("artifacts", [])]
        return cls(**d)

    def artifact(self, name: str) -> ArtifactRef:
        for a in self.artifacts:
            if a.name == name:
                return a
        raise KeyError(name)


class RunStore:
    def __init__(self, root: str | os.PathLike | None = None):
        root = root if root is not None else os.environ.get(STORE_ENV)
        if not root:
            raise RunStoreError(f"no store root given and ${STORE_ENV} is unset")
        self.root = Path(root)

    # -- paths

    def run_dir(self, run_id: str) -> Path:
        return self.root / "runs" / run_id

    def _record_path(self, run_id: str) -> Path:
        return self.run_dir(run_id) / "record.json"

    def _best_path(self, task: str) -> Path:
        return self.root / "best" / f"{task}.json"

    # -- records

    def _save(self, rec: RunRecord) -> None:
        _atomic_write(self._record_path(rec.run_id), json.dumps(rec.to_dict(), indent=2, sort_keys=True).encode())

    def get(self, run_id: str) -> RunRecord:
        path = self._record_path(run_id)
        if not path.exists():
            raise RunStoreError(f"no run {run_id!r} in {self.root}")
        return RunRecord.from_dict(json.loads(path.read_text()))

    def runs(self, task: str | None = None) -> list[RunRecord]:
        base = self.root / "runs"
        if not base.exists():
            return []
        out = [self.get(p.name) for p in sorted(base.iterdir()) if (p / "record.json").exists()]
        return [r for r in out if task is None or r.task == task]

    def start_run(self, task: str, config: Any, code_version: str | None = None) -> RunRecord:
        stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%dT%H%M%S%f")
        try:
            self.root.mkdir(parents=True, exist_ok=True)
            while True:
                run_id = f"{stamp}-{secrets.token_hex(4)}"
                try:
                    self.run_dir(run_id).mkdir(parents=True)
                    break
                except FileExistsError:
                    continue
        except OSError as exc:
            raise RunStoreError(f"store {self.root} is not writable: {exc}") from exc
        rec = RunRecord(run_id, task, config, code_version or globals()["code_version"](), started_at=_now())
        self._save(rec)
        return rec

    def _require_started(self, rec: RunRecord) -> RunRecord:
        current = self.get(rec.run_id)
        if current.status != "started":
            raise RunStoreError(f"run {rec.run_id} is {current.status}, cannot modify")
        return current

    def log_artifact(self, rec: RunRecord, kind: str, state: bytes | TransformArtifact,
                     name: str | None = None) -> RunRecord:
        art = state if isinstance(state, TransformArtifact) else TransformArtifact(kind, state)
        data = art.payload()
        current = self._require_started(rec)
        digest = sha256(data)
        rel = f"artifacts/{digest}.bin"
        path = self.run_dir(rec.run_id) / rel
        if not path.exists():
            _atomic_write(path, data)
        name = name or kind
        current.artifacts = [a for a in current.artifacts if a.name != name] + [ArtifactRef(name, kind, digest, rel)]
        self._save(current)
        rec.artifacts = current.artifacts
        return current

    def fail_run(self, rec: RunRecord, error: str) -> RunRecord:
        current = self._require_started(rec)
        current.status, current.ended_at, current.error = "failed", _now(), error
        self._save(current)
        return current

    def finish_run(self, rec: RunRecord, metrics: Mapping[str, float], metric: str = DEFAULT_METRIC,
                   promote: bool = True) -> RunRecord:
        """Mark finished; with ``promote`` the best pointer advances if ``metric`` improved."""
        current = self._require_started(rec)
        if not current.artifacts:
            raise RunStoreError(f"run {rec.run_id} has no artifacts")
        current.status, current.ended_at = "finished", _now()
        current.metrics = {k: float(v) for k, v in metrics.items()}
        self._save(current)
        if promote and metric in current.metrics:
            self._maybe_promote(current, metric)
        rec.status, rec.ended_at, rec.metrics = current.status, current.ended_at, current.metrics
        return current

    # -- versions

    def best(self, task: str) -> dict | None:
        path = self._best_path(task)
        if not path.exists():
            return None
        return json.loads(path.read_text())

    @contextlib.contextmanager
    def _pointer_lock(self, task: str):
        # serializes compare-and-swap on the pointer across processes
        path = self.root / "best" / f".{task}.lock"
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "a") as fh:
            fcntl.flock(fh, fcntl.LOCK_EX)
            try:
                yield
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)

    def _write_pointer(self, rec: RunRecord, metric: str, value: float, cur: dict | None) -> None:
        version = 1 if cur is None else int(cur["version"]) + 1
        pointer = {"task": rec.task, "run_id": rec.run_id, "metric": metric, "value": value, "version": version}
        _atomic_write(self._best_path(rec.task), json.dumps(pointer, sort_keys=True).encode())

    def _maybe_promote(self, rec: RunRecord, metric: str) -> bool:
        value = rec.metrics[metric]
        with self._pointer_lock(rec.task):
            cur = self.best(rec.task)
            if cur is not None and not value > cur["value"]:
                return False
            self._write_pointer(rec, metric, value, cur)
        return True

    def promote(self, rec: RunRecord, metric: str = DEFAULT_METRIC, force: bool = False) -> bool:
        """Point the task's best version at ``rec``; ``force`` skips the comparison."""
        rec = self.get(rec.run_id)
        if force:
            with self._pointer_lock(rec.task):
                self._write_pointer(rec, metric, rec.metrics.get(metric, float("nan")), self.best(rec.task))
            return True
        return self._maybe_promote(rec, metric)

    # -- loading

    def read_artifact(self, rec: RunRecord, name: str) -> bytes:
        try:
            ref = rec.artifact(name)
        except KeyError:
            raise IntegrityError(f"run {rec.run_id} has no artifact {name!r}") from None
        path = self.run_dir(rec.run_id) / ref.path
        if not path.exists():
            raise IntegrityError(f"artifact {name!r} missing from run {rec.run_id} ({ref.path})")
        data = path.read_bytes()
        if sha256(data) != ref.sha256:
            raise IntegrityError(f"artifact {name!r} of run {rec.run_id} fails its content hash")
        return data

    def load_for_inference(self, task: str, expected_code_version: str | None = None,
                           allow_mismatch: bool = False) -> "LoadedRun":
        pointer = self.best(task)
        if pointer is None:
            raise RunStoreError(f"no model version recorded for task {task!r}")
        rec = self.get(pointer["run_id"])
        expected = expected_code_version or code_version()
        if rec.code_version != expected:
            if not allow_mismatch:
                raise ParityError(f"run {rec.run_id} was trained with code {rec.code_version}, running {expected}")
            log.warning("code version mismatch overridden: trained %s, running %s", rec.code_version, expected)
        blobs = {a.name: self.read_artifact(rec, a.name) for a in rec.artifacts}
        return LoadedRun(rec, int(pointer["version"]), blobs)


@dataclass
class LoadedRun:
    record: RunRecord
    version: int
    artifacts: dict[str, bytes]

    def __getitem__(self, name: str) -> bytes:
        if name not in self.artifacts:
            raise IntegrityError(f"run {self.record.run_id} has no artifact {name!r}")
        return self.artifacts[name]
