"""Blob storage on a local directory tree.

Layout::

    <root>/<container>/<path>        blob payloads
    <root>/<container>/.manifest     JSON lines: one header, then one record
                                     per put (path, size, sha256); the last
                                     record for a path wins

Payloads are written to a temp file and moved into place with
``os.replace``, so readers never see a partial blob.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import posixpath
import re
import threading
import time
import uuid
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import BinaryIO, Callable, Optional, Protocol, Union

from .errors import ConflictError, NotFoundError, ValidationError

MANIFEST = ".manifest"
_TMP_PREFIX = ".tmp-"
_CHUNK = 1 << 20
_NAME_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]{0,127}$")


class ContainerKind(str, Enum):
    INPUT = "input"
    OUTPUT = "output"


@dataclass(frozen=True)
class ContainerRef:
    name: str
    kind: ContainerKind
    created_at: float

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind.value, "created_at": self.created_at}

    @classmethod
    def from_dict(cls, data: dict) -> "ContainerRef":
        return cls(data["name"], ContainerKind(data["kind"]), float(data["created_at"]))


@dataclass(frozen=True)
class BlobRef:
    container: ContainerRef
    path: str
    size_bytes: int
    checksum: str

    def to_dict(self) -> dict:
        return {
            "container": self.container.to_dict(),
            "path": self.path,
            "size_bytes": self.size_bytes,
            "checksum": self.checksum,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BlobRef":
        return cls(
            ContainerRef.from_dict(data["container"]),
            data["path"],
            int(data["size_bytes"]),
            data["checksum"],
        )


class MountTarget(Protocol):
    id: str
    mounted_containers: set

    def accepts_mounts(self) -> bool: ...


def normalize_blob_path(path: str) -> str:
    """Validate a container-relative path and return it unchanged.

    Rejects empty, absolute, non-normalized and upward-traversing paths, and
    names reserved for the store's own bookkeeping.
    """
    if not isinstance(path, str) or not path:
        raise ValidationError("blob path must be a non-empty string")
    if "\\" in path or "\x00" in path:
        raise ValidationError(f"blob path {path!r} contains a forbidden character")
    if path.startswith("/"):
        raise ValidationError(f"blob path {path!r} must be relative")
    if posixpath.normpath(path) != path:
        raise ValidationError(f"blob path {path!r} is not normalized")
    parts = path.split("/")
    if ".." in parts:
        raise ValidationError(f"blob path {path!r} escapes its container")
    if path == MANIFEST or any(p.startswith(_TMP_PREFIX) for p in parts):
        raise ValidationError(f"blob path {path!r} is reserved")
    return path


def _digest_stream(src: BinaryIO, dst: BinaryIO) -> tuple[int, str]:
    h = hashlib.sha256()
    size = 0
    while True:
        chunk = src.read(_CHUNK)
        if not chunk:
            break
        h.update(chunk)
        dst.write(chunk)
        size += len(chunk)
    return size, h.hexdigest()


class BlobStore:
    """Containers of blobs under ``root``; safe for concurrent use."""

    def __init__(self, root: Union[str, Path], clock: Callable[[], float] = time.time):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._clock = clock
        self._lock = threading.Lock()
        self._containers: dict[str, ContainerRef] = {}
        self._blobs: dict[str, dict[str, BlobRef]] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._load()

    def _load(self) -> None:
        for entry in sorted(self.root.iterdir()):
            manifest = entry / MANIFEST
            if not manifest.is_file():
                continue
            blobs: dict[str, BlobRef] = {}
            ref: Optional[ContainerRef] = None
            with manifest.open("r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    rec = json.loads(line)
                    if "container" in rec and ref is None:
                        ref = ContainerRef(rec["container"], ContainerKind(rec["kind"]), float(rec["created_at"]))
                        continue
                    if ref is None:
                        break
                    blobs[rec["path"]] = BlobRef(ref, rec["path"], int(rec["size"]), rec["sha256"])
            if ref is None:
                continue
            self._containers[ref.name] = ref
            self._blobs[ref.name] = blobs
            self._locks[ref.name] = threading.Lock()

    # containers -----------------------------------------------------------

    def create_container(self, name: str, kind: Union[ContainerKind, str]) -> ContainerRef:
        if not _NAME_RE.match(name or ""):
            raise ValidationError(f"invalid container name {name!r}")
        kind = ContainerKind(kind)
        with self._lock:
            if name in self._containers:
                raise ConflictError(f"container {name!r} already exists")
            cdir = self.root / name
            try:
                cdir.mkdir()
            except FileExistsError:
                raise ConflictError(f"container {name!r} already exists on disk") from None
            ref = ContainerRef(name, kind, float(self._clock()))
            header = {"container": name, "kind": kind.value, "created_at": ref.created_at}
            with (cdir / MANIFEST).open("w", encoding="utf-8") as fh:
                fh.write(json.dumps(header, sort_keys=True) + "\n")
            self._containers[name] = ref
            self._blobs[name] = {}
            self._locks[name] = threading.Lock()
            return ref

    def get_container(self, name: Union[str, ContainerRef]) -> ContainerRef:
        key = name.name if isinstance(name, ContainerRef) else name
        try:
            return self._containers[key]
        except KeyError:
            raise NotFoundError(f"container {key!r} not found") from None

    def list_containers(self) -> list[ContainerRef]:
        with self._lock:
            return sorted(self._containers.values(), key=lambda c: c.name)

    # blobs ----------------------------------------------------------------

    def put_blob(
        self,
        container: Union[str, ContainerRef],
        path: str,
        data: Union[bytes, bytearray, memoryview, BinaryIO],
    ) -> BlobRef:
        ref = self.get_container(container)
        path = normalize_blob_path(path)
        src: BinaryIO = io.BytesIO(bytes(data)) if isinstance(data, (bytes, bytearray, memoryview)) else data
        cdir = self.root / ref.name
        target = cdir / path
        target.parent.mkdir(parents=True, exist_ok=True)
        tmp = cdir / f"{_TMP_PREFIX}{uuid.uuid4().hex}"
        try:
            with tmp.open("wb") as fh:
                size, digest = _digest_stream(src, fh)
            blob = BlobRef(ref, path, size, digest)
            with self._locks[ref.name]:
                os.replace(tmp, target)
                with (cdir / MANIFEST).open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"path": path, "size": size, "sha256": digest}, sort_keys=True) + "\n")
                self._blobs[ref.name][path] = blob
        finally:
            if tmp.exists():
                tmp.unlink()
        return blob

    def get_blob(self, container: Union[str, ContainerRef], path: str) -> bytes:
        ref = self.get_container(container)
        path = normalize_blob_path(path)
        with self._locks[ref.name]:
            if path not in self._blobs[ref.name]:
                raise NotFoundError(f"blob {ref.name}/{path} not found")
            return (self.root / ref.name / path).read_bytes()

    def stat_blob(self, container: Union[str, ContainerRef], path: str) -> BlobRef:
        ref = self.get_container(container)
        try:
            return self._blobs[ref.name][normalize_blob_path(path)]
        except KeyError:
            raise NotFoundError(f"blob {ref.name}/{path} not found") from None

    def has_blob(self, container: Union[str, ContainerRef], path: str) -> bool:
        try:
            self.stat_blob(container, path)
        except NotFoundError:
            return False
        return True

    def list_blobs(self, container: Union[str, ContainerRef]) -> list[BlobRef]:
        ref = self.get_container(container)
        with self._locks[ref.name]:
            return [self._blobs[ref.name][p] for p in sorted(self._blobs[ref.name])]

    # mounts ---------------------------------------------------------------

    def mount(self, container: Union[str, ContainerRef], node: MountTarget) -> frozenset:
        """Attach a container to a node; repeating the same pair is a no-op."""
        ref = self.get_container(container)
        if not node.accepts_mounts():
            raise ValidationError(f"node {node.id} cannot take mounts in its current state")
        node.mounted_containers.add(ref)
        return frozenset(node.mounted_containers)

    def unmount(self, container: Union[str, ContainerRef], node: MountTarget) -> frozenset:
        key = container.name if isinstance(container, ContainerRef) else container
        match = [c for c in node.mounted_containers if c.name == key]
        if not match:
            raise NotFoundError(f"container {key!r} is not mounted on node {node.id}")
        node.mounted_containers.difference_update(match)
        return frozenset(node.mounted_containers)

