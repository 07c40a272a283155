"""Output directory ownership: lock, JSON/CSV/SVG writers, hashed manifest."""
import csv
import hashlib
import io
import json
import logging
import math
import os
import time
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np
from pydantic import BaseModel

from qcdistort.config import Settings
from qcdistort.exceptions import InputError
from qcdistort.models.schemas import SCHEMA_VERSION, ArtifactEntry, RunManifest, TimingRecord

logger = logging.getLogger(__name__)

LOCK_NAME = ".qcdistort.lock"
MANIFEST_NAME = "manifest.json"
TIMING_NAME = "timing.json"
RESOLVED_CONFIG_NAME = "config.resolved.json"


def to_jsonable(value: Any) -> Any:
    """Plain JSON values; non-finite floats become "inf"/"-inf"/"nan"."""
    if isinstance(value, BaseModel):
        return to_jsonable(value.model_dump(mode="python"))
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, Fraction):
        return f"{value.numerator}/{value.denominator}"
    if isinstance(value, (float, np.floating)):
        x = float(value)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    if value is None or isinstance(value, str):
        return value
    if isinstance(value, Path):
        return value.as_posix()
    raise TypeError(f"Cannot serialize {type(value).__name__}")


def dumps_json(document: Any) -> str:
    return json.dumps(to_jsonable(document), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _csv_cell(value: Any) -> str:
    value = to_jsonable(value)
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dumps_csv(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
    writer.writerow(list(header))
    for row in rows:
        writer.writerow([_csv_cell(v) for v in row])
    return buf.getvalue()


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


class ArtifactWriter:
    """Context manager owning one run directory.

    Artifacts are recorded in write order; the manifest lists them sorted by name.
    """

    def __init__(self, settings: Settings, out_dir: str | Path, command: str, seed: int, config: dict):
        self.settings = settings
        self.out_dir = Path(out_dir)
        self.command = command
        self.seed = seed
        self.config = to_jsonable(config)
        self.checks: dict[str, str] = {}
        self.flags: list[str] = []
        self.phases: dict[str, float] = {}
        self._entries: dict[str, ArtifactEntry] = {}
        self._lock_path = self.out_dir / LOCK_NAME
        self._lock_fd: Optional[int] = None
        self._started = 0.0
        self._phase_started: Optional[tuple[str, float]] = None
        self.manifest: Optional[RunManifest] = None

    # --- Lock ---
    def _acquire(self) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        deadline = time.monotonic() + max(self.settings.lock_timeout_s, 0.0)
        while True:
            try:
                self._lock_fd = os.open(self._lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
                os.write(self._lock_fd, str(os.getpid()).encode())
                return
            except FileExistsError:
                if time.monotonic() >= deadline:
                    raise InputError(f"Output directory {self.out_dir} is locked by another run ({self._lock_path})")
                time.sleep(0.1)

    def _release(self) -> None:
        if self._lock_fd is not None:
            os.close(self._lock_fd)
            self._lock_fd = None
            try:
                self._lock_path.unlink()
            except FileNotFoundError:
                logger.warning(f"Lock file {self._lock_path} vanished before release")

    def __enter__(self) -> "ArtifactWriter":
        self._acquire()
        self._started = time.perf_counter()
        self.write_json(RESOLVED_CONFIG_NAME, {"schema_version": SCHEMA_VERSION, **self.config})
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        try:
            self.end_phase()
            if exc_type is not None:
                # partial outputs stay listed so the failure can be inspected
                self.flags.append(f"aborted: {exc_type.__name__}")
            self.finalize()
        finally:
            self._release()

    # --- Timing ---
    def phase(self, name: str) -> None:
        self.end_phase()
        self._phase_started = (name, time.perf_counter())
        logger.info(f"[{self.command}] {name}")

    def end_phase(self) -> None:
        if self._phase_started is not None:
            name, t0 = self._phase_started
            self.phases[name] = self.phases.get(name, 0.0) + time.perf_counter() - t0
            self._phase_started = None

    # --- Writers ---
    def _record(self, name: str, data: bytes) -> Path:
        if Path(name).is_absolute() or ".." in Path(name).parts:
            raise ValueError(f"Artifact name escapes the run directory: {name}")
        path = self.out_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        self._entries[name] = ArtifactEntry(name=name, sha256=hashlib.sha256(data).hexdigest(), bytes=len(data))
        logger.debug(f"Wrote {path} ({len(data)} bytes)")
        return path

    def write_json(self, name: str, document: Any) -> Path:
        doc = to_jsonable(document)
        if isinstance(doc, dict) and "schema_version" not in doc:
            doc = {"schema_version": SCHEMA_VERSION, **doc}
        return self._record(name, dumps_json(doc).encode("utf-8"))

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        return self._record(name, dumps_csv(header, rows).encode("utf-8"))

    def write_svg(self, name: str, drawing) -> Path:
        return self._record(name, drawing.as_svg().encode("utf-8"))

    def write_text(self, name: str, text: str) -> Path:
        return self._record(name, text.encode("utf-8"))

    def check(self, name: str, status: str) -> None:
        self.checks[name] = status

    def flag(self, message: str) -> None:
        if message not in self.flags:
            logger.warning(f"[{self.command}] {message}")
            self.flags.append(message)

    @property
    def artifact_names(self) -> list[str]:
        return sorted(self._entries)

    def finalize(self) -> RunManifest:
        manifest = RunManifest(
            command=self.command,
            seed=self.seed,
            config=self.config,
            artifacts=[self._entries[k] for k in sorted(self._entries)],
            checks=dict(sorted(self.checks.items())),
            flags=list(self.flags),
        )
        (self.out_dir / MANIFEST_NAME).write_text(dumps_json(manifest.model_dump(mode="json")), encoding="utf-8")
        timing = TimingRecord(command=self.command, seconds=time.perf_counter() - self._started,
                              phases=dict(sorted(self.phases.items())))
        (self.out_dir / TIMING_NAME).write_text(dumps_json(timing.model_dump(mode="json")), encoding="utf-8")
        logger.info(f"[{self.command}] {len(manifest.artifacts)} artifacts in {self.out_dir}")
        self.manifest = manifest
        return manifest


# --- Reading runs back ---
def load_manifest(run_dir: str | Path) -> RunManifest:
    """Read a run's manifest and validate every listed artifact against its hash."""
    run_dir = Path(run_dir)
    path = run_dir / MANIFEST_NAME
    if not path.is_file():
        raise InputError(f"No manifest in {run_dir}")
    try:
        manifest = RunManifest.model_validate_json(path.read_text(encoding="utf-8"))
    except ValueError as e:
        raise InputError(f"Corrupted manifest {path}: {e}") from e
    for entry in manifest.artifacts:
        artifact = run_dir / entry.name
        if not artifact.is_file():
            raise InputError(f"Artifact {entry.name} listed in {path} is missing")
        if sha256_file(artifact) != entry.sha256:
            raise InputError(f"Artifact {entry.name} in {run_dir} does not match its manifest hash")
    return manifest


def read_json_artifact(run_dir: str | Path, name: str) -> Any:
    with open(Path(run_dir) / name, "r", encoding="utf-8") as f:
        return json.load(f)


def read_csv_artifact(run_dir: str | Path, name: str) -> list[dict[str, str]]:
    with open(Path(run_dir) / name, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


def parse_float(value: Any) -> float:
    # "inf", "-inf" and "nan" parse directly
    return float(value)
