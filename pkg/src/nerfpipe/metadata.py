"""Durable job records with compare-and-set lifecycle transitions.

Backed by an embedded SQLite file.  Each job is one row holding its JSON
record; ``transition_job`` takes the write lock (``BEGIN IMMEDIATE``), checks
the current state and applies the move in one transaction, so of two
concurrent movers exactly one wins.
"""

from __future__ import annotations

import hashlib
import json
import sqlite3
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Union

from .errors import ConflictError, NotFoundError, TransitionError, ValidationError
from .storage import BlobRef, ContainerRef


class JobState(str, Enum):
    AWAITING_DATA = "AwaitingData"
    DATA_READY = "DataReady"
    QUEUED = "Queued"
    PROVISIONING = "Provisioning"
    MOUNTING = "Mounting"
    PROCESSING = "Processing"
    TRAINING = "Training"
    UNMOUNTING = "Unmounting"
    COMPLETED = "Completed"
    FAILED = "Failed"

    @property
    def terminal(self) -> bool:
        return self in (JobState.COMPLETED, JobState.FAILED)


S = JobState

CANONICAL_PATH = (
    S.AWAITING_DATA,
    S.DATA_READY,
    S.QUEUED,
    S.PROVISIONING,
    S.MOUNTING,
    S.PROCESSING,
    S.TRAINING,
    S.UNMOUNTING,
    S.COMPLETED,
)

_EDGES = set(zip(CANONICAL_PATH, CANONICAL_PATH[1:]))
# eviction requeue restarts the interrupted phase
_EDGES |= {(S.PROCESSING, S.QUEUED), (S.TRAINING, S.QUEUED)}
# orphan repair: node lost before any phase began
_EDGES |= {(S.PROVISIONING, S.QUEUED), (S.MOUNTING, S.QUEUED)}
_EDGES |= {(s, S.FAILED) for s in JobState if not s.terminal}
LEGAL_EDGES: frozenset[tuple[JobState, JobState]] = frozenset(_EDGES)

RESTART_EDGES = frozenset({(S.PROCESSING, S.QUEUED), (S.TRAINING, S.QUEUED)})


def is_legal_job_transition(src: JobState, dst: JobState) -> bool:
    return (JobState(src), JobState(dst)) in LEGAL_EDGES


class DataKind(str, Enum):
    IMAGE_SET = "image_set"
    VIDEO = "video"


@dataclass(frozen=True)
class DataManifest:
    name: str
    kind: DataKind = DataKind.IMAGE_SET
    has_positional_data: bool = False
    approx_size_bytes: int = 0

    def __post_init__(self):
        if not isinstance(self.name, str) or not self.name.strip():
            raise ValidationError("manifest name must be non-empty")
        try:
            object.__setattr__(self, "kind", DataKind(self.kind))
        except ValueError:
            raise ValidationError(f"manifest kind must be one of {[k.value for k in DataKind]}") from None
        if int(self.approx_size_bytes) < 0:
            raise ValidationError("approx_size_bytes must be >= 0")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind.value,
            "has_positional_data": bool(self.has_positional_data),
            "approx_size_bytes": int(self.approx_size_bytes),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DataManifest":
        unknown = set(data) - {"name", "kind", "has_positional_data", "approx_size_bytes"}
        if unknown:
            raise ValidationError(f"unknown manifest keys: {sorted(unknown)}")
        if "name" not in data:
            raise ValidationError("manifest requires a name")
        return cls(
            name=data["name"],
            kind=data.get("kind", DataKind.IMAGE_SET),
            has_positional_data=bool(data.get("has_positional_data", False)),
            approx_size_bytes=int(data.get("approx_size_bytes", 0)),
        )


@dataclass
class JobRecord:
    id: str
    state: JobState
    manifest: DataManifest
    input_container: ContainerRef
    created_at: float
    output_container: Optional[ContainerRef] = None
    assigned_node: Optional[str] = None
    attempts: int = 0
    timestamps: dict = field(default_factory=dict)
    result: Optional[BlobRef] = None
    failure_reason: Optional[str] = None
    queue_seq: Optional[int] = None
    webhook_url: Optional[str] = None
    artifacts: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def validate(self) -> None:
        if self.state is JobState.COMPLETED and self.result is None:
            raise ValidationError(f"job {self.id}: Completed requires a result")
        if self.state is JobState.FAILED and not self.failure_reason:
            raise ValidationError(f"job {self.id}: Failed requires a failure reason")
        if self.attempts < 0:
            raise ValidationError("attempts must be >= 0")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "state": self.state.value,
            "manifest": self.manifest.to_dict(),
            "input_container": self.input_container.to_dict(),
            "created_at": self.created_at,
            "output_container": self.output_container.to_dict() if self.output_container else None,
            "assigned_node": self.assigned_node,
            "attempts": self.attempts,
            "timestamps": dict(self.timestamps),
            "result": self.result.to_dict() if self.result else None,
            "failure_reason": self.failure_reason,
            "queue_seq": self.queue_seq,
            "webhook_url": self.webhook_url,
            "artifacts": {k: v.to_dict() for k, v in self.artifacts.items()},
            "history": list(self.history),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "JobRecord":
        return cls(
            id=d["id"],
            state=JobState(d["state"]),
            manifest=DataManifest.from_dict(d["manifest"]),
            input_container=ContainerRef.from_dict(d["input_container"]),
            created_at=float(d["created_at"]),
            output_container=ContainerRef.from_dict(d["output_container"]) if d.get("output_container") else None,
            assigned_node=d.get("assigned_node"),
            attempts=int(d.get("attempts", 0)),
            timestamps=dict(d.get("timestamps", {})),
            result=BlobRef.from_dict(d["result"]) if d.get("result") else None,
            failure_reason=d.get("failure_reason"),
            queue_seq=d.get("queue_seq"),
            webhook_url=d.get("webhook_url"),
            artifacts={k: BlobRef.from_dict(v) for k, v in d.get("artifacts", {}).items()},
            history=list(d.get("history", [])),
        )


def replay_history(record: JobRecord) -> list[JobState]:
    """Walk the recorded transitions, checking each edge; returns the path.

    Raises:
        TransitionError: the history contains an illegal or disconnected edge.
    """
    path: list[JobState] = []
    for i, step in enumerate(record.history):
        dst = JobState(step["to"])
        if i == 0:
            if step.get("from") is not None or dst is not JobState.AWAITING_DATA:
                raise TransitionError(f"job {record.id}: history must open with creation in AwaitingData")
        else:
            src = JobState(step["from"])
            if src is not path[-1]:
                raise TransitionError(f"job {record.id}: step {i} starts from {src.value}, expected {path[-1].value}")
            if not is_legal_job_transition(src, dst):
                raise TransitionError(f"job {record.id}: illegal edge {src.value} -> {dst.value}")
        path.append(dst)
    if path and path[-1] is not record.state:
        raise TransitionError(f"job {record.id}: history ends in {path[-1].value}, record says {record.state.value}")
    return path


# fields a transition may set alongside the state change
_SETTABLE = {
    "assigned_node",
    "result",
    "failure_reason",
    "output_container",
    "queue_seq",
    "manifest",
    "artifacts",
}


def _jsonable(value: Any) -> Any:
    if hasattr(value, "to_dict"):
        return value.to_dict()
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


_SCHEMA = """
CREATE TABLE IF NOT EXISTS jobs (
    id TEXT PRIMARY KEY,
    seq INTEGER NOT NULL,
    state TEXT NOT NULL,
    assigned_node TEXT,
    record TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS jobs_state ON jobs(state);
CREATE TABLE IF NOT EXISTS counters (name TEXT PRIMARY KEY, value INTEGER NOT NULL);
CREATE TABLE IF NOT EXISTS grants (
    token_hash TEXT PRIMARY KEY,
    job_id TEXT NOT NULL,
    container TEXT NOT NULL,
    expires_at REAL NOT NULL
);
CREATE TABLE IF NOT EXISTS notifications (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    job_id TEXT NOT NULL,
    at REAL NOT NULL,
    kind TEXT NOT NULL,
    payload TEXT NOT NULL
);
"""


def token_digest(token: str) -> str:
    return hashlib.sha256(token.encode("utf-8")).hexdigest()


class MetadataStore:
    """Job records, upload grants and client notifications in one SQLite file."""

    def __init__(self, path: Union[str, Path], clock: Callable[[], float] = time.time):
        self.path = str(path)
        if self.path != ":memory:":
            Path(self.path).parent.mkdir(parents=True, exist_ok=True)
        self._clock = clock
        self._local = threading.local()
        self._all: list[sqlite3.Connection] = []
        self._all_lock = threading.Lock()
        with self._conn() as conn:
            conn.executescript(_SCHEMA)

    def _conn(self) -> sqlite3.Connection:
        conn = getattr(self._local, "conn", None)
        if conn is None:
            conn = sqlite3.connect(self.path, timeout=30.0, isolation_level=None, check_same_thread=False)
            conn.execute("PRAGMA journal_mode=WAL")
            conn.execute("PRAGMA synchronous=NORMAL")
            self._local.conn = conn
            with self._all_lock:
                self._all.append(conn)
        return conn

    def close(self) -> None:
        with self._all_lock:
            for conn in self._all:
                conn.close()
            self._all.clear()
        self._local = threading.local()

    @contextmanager
    def _tx(self):
        conn = self._conn()
        conn.execute("BEGIN IMMEDIATE")
        try:
            yield conn
        except BaseException:
            conn.execute("ROLLBACK")
            raise
        conn.execute("COMMIT")

    def now(self) -> float:
        return float(self._clock())

    # counters -------------------------------------------------------------

    def next_sequence(self, name: str) -> int:
        with self._tx() as conn:
            row = conn.execute("SELECT value FROM counters WHERE name = ?", (name,)).fetchone()
            value = (row[0] if row else 0) + 1
            conn.execute(
                "INSERT INTO counters(name, value) VALUES (?, ?) "
                "ON CONFLICT(name) DO UPDATE SET value = excluded.value",
                (name, value),
            )
            return value

    # jobs -----------------------------------------------------------------

    def upsert_job(self, record: JobRecord) -> JobRecord:
        record.validate()
        payload = json.dumps(record.to_dict(), sort_keys=True)
        with self._tx() as conn:
            row = conn.execute("SELECT seq FROM jobs WHERE id = ?", (record.id,)).fetchone()
            if row is None:
                seq = conn.execute("SELECT COALESCE(MAX(seq), 0) + 1 FROM jobs").fetchone()[0]
                conn.execute(
                    "INSERT INTO jobs(id, seq, state, assigned_node, record) VALUES (?, ?, ?, ?, ?)",
                    (record.id, seq, record.state.value, record.assigned_node, payload),
                )
            else:
                conn.execute(
                    "UPDATE jobs SET state = ?, assigned_node = ?, record = ? WHERE id = ?",
                    (record.state.value, record.assigned_node, payload, record.id),
                )
        return record

    def get_job(self, job_id: str) -> JobRecord:
        row = self._conn().execute("SELECT record FROM jobs WHERE id = ?", (job_id,)).fetchone()
        if row is None:
            raise NotFoundError(f"job {job_id!r} not found")
        return JobRecord.from_dict(json.loads(row[0]))

    def query_jobs(
        self,
        states: Union[None, JobState, str, Iterable[Union[JobState, str]]] = None,
        assigned_node: Optional[str] = None,
    ) -> list[JobRecord]:
        sql = "SELECT record FROM jobs"
        where, args = [], []
        if states is not None:
            if isinstance(states, (JobState, str)):
                states = [states]
            values = [JobState(s).value for s in states]
            where.append(f"state IN ({','.join('?' * len(values))})")
            args.extend(values)
        if assigned_node is not None:
            where.append("assigned_node = ?")
            args.append(assigned_node)
        if where:
            sql += " WHERE " + " AND ".join(where)
        sql += " ORDER BY seq"
        rows = self._conn().execute(sql, args).fetchall()
        return [JobRecord.from_dict(json.loads(r[0])) for r in rows]

    def job_ids(self) -> list[str]:
        return [r[0] for r in self._conn().execute("SELECT id FROM jobs ORDER BY seq").fetchall()]

    def transition_job(
        self,
        job_id: str,
        from_state: Union[JobState, str],
        to_state: Union[JobState, str],
        annotations: Optional[dict] = None,
        at: Optional[float] = None,
    ) -> JobRecord:
        """Atomically move a job from ``from_state`` to ``to_state``.

        Keys of ``annotations`` naming record fields (``assigned_node``,
        ``result``, ``failure_reason``...) are written with the move; the
        whole dict is kept in the job's history.  Leaving Processing or
        Training for Queued counts one more attempt.

        Raises:
            TransitionError: the edge is not in the lifecycle graph.
            ConflictError: the job is no longer in ``from_state``.
            NotFoundError: no such job.
        """
        src, dst = JobState(from_state), JobState(to_state)
        if not is_legal_job_transition(src, dst):
            raise TransitionError(f"illegal job transition {src.value} -> {dst.value}")
        annotations = dict(annotations or {})
        when = self.now() if at is None else float(at)
        with self._tx() as conn:
            row = conn.execute("SELECT record FROM jobs WHERE id = ?", (job_id,)).fetchone()
            if row is None:
                raise NotFoundError(f"job {job_id!r} not found")
            rec = JobRecord.from_dict(json.loads(row[0]))
            if rec.state is not src:
                raise ConflictError(
                    f"job {job_id} is {rec.state.value}, expected {src.value} (wanted -> {dst.value})"
                )
            for key, value in annotations.items():
                if key in _SETTABLE:
                    setattr(rec, key, value)
            if (src, dst) in RESTART_EDGES:
                rec.attempts += 1
            rec.state = dst
            rec.timestamps[dst.value] = when
            rec.history.append(
                {"from": src.value, "to": dst.value, "at": when, "annotations": _jsonable(annotations)}
            )
            rec.validate()
            conn.execute(
                "UPDATE jobs SET state = ?, assigned_node = ?, record = ? WHERE id = ?",
                (rec.state.value, rec.assigned_node, json.dumps(rec.to_dict(), sort_keys=True), job_id),
            )
        return rec

    def update_fields(self, job_id: str, **fields) -> JobRecord:
        """Set non-state fields (no lifecycle move), e.g. recorded artifacts."""
        bad = set(fields) - (_SETTABLE | {"webhook_url"})
        if bad:
            raise ValidationError(f"cannot update fields {sorted(bad)}")
        with self._tx() as conn:
            row = conn.execute("SELECT record FROM jobs WHERE id = ?", (job_id,)).fetchone()
            if row is None:
                raise NotFoundError(f"job {job_id!r} not found")
            rec = replace(JobRecord.from_dict(json.loads(row[0])), **fields)
            rec.validate()
            conn.execute(
                "UPDATE jobs SET assigned_node = ?, record = ? WHERE id = ?",
                (rec.assigned_node, json.dumps(rec.to_dict(), sort_keys=True), job_id),
            )
        return rec

    # upload grants --------------------------------------------------------

    def put_grant(self, token: str, job_id: str, container: str, expires_at: float) -> None:
        with self._tx() as conn:
            conn.execute(
                "INSERT INTO grants(token_hash, job_id, container, expires_at) VALUES (?, ?, ?, ?)",
                (token_digest(token), job_id, container, expires_at),
            )

    def lookup_grant(self, token: str) -> Optional[tuple[str, str, float]]:
        row = self._conn().execute(
            "SELECT job_id, container, expires_at FROM grants WHERE token_hash = ?", (token_digest(token),)
        ).fetchone()
        return tuple(row) if row else None

    # notifications --------------------------------------------------------

    def add_notification(self, job_id: str, kind: str, payload: dict, at: Optional[float] = None) -> None:
        when = self.now() if at is None else at
        with self._tx() as conn:
            conn.execute(
                "INSERT INTO notifications(job_id, at, kind, payload) VALUES (?, ?, ?, ?)",
                (job_id, when, kind, json.dumps(payload, sort_keys=True)),
            )

    def notifications(self, job_id: Optional[str] = None) -> list[dict]:
        sql = "SELECT job_id, at, kind, payload FROM notifications"
        args: tuple = ()
        if job_id is not None:
            sql += " WHERE job_id = ?"
            args = (job_id,)
        rows = self._conn().execute(sql + " ORDER BY id", args).fetchall()
        return [{"job_id": r[0], "at": r[1], "kind": r[2], "payload": json.loads(r[3])} for r in rows]

    # export ---------------------------------------------------------------

    def export_jsonl(self) -> str:
        lines = [json.dumps({"type": "job", **j.to_dict()}, sort_keys=True) for j in self.query_jobs()]
        lines += [json.dumps({"type": "notification", **n}, sort_keys=True) for n in self.notifications()]
        return "".join(line + "\n" for line in lines)
