"""Template database: enrollment, verification, identification, audit log.

A database is a directory holding one binary file per template or code plus a
``manifest.json`` that names them.  :func:`load_db` reads the directory into an
in-memory :class:`TemplateDB`; :func:`enroll` runs the feature pipelines and
persists new records atomically (every file, and finally the manifest, is
written to a temp name and renamed); :func:`verify`, :func:`identify`, and
:func:`access` score probes against the stored records with the fusion
pipeline.  Access decisions and enrollments append JSON-line events to an
audit log whose timestamps are strictly increasing within the process.

Multi-template rule: a subject may hold several fingerprint templates and iris
code pairs; the per-trait score against that subject is the maximum over the
subject's templates.  For the iris trait the unit of aggregation is the
enrolled pair — each pair's haar/mellin distances are fused first and the best
pair wins — so one eye's observation is never mixed with another's.
"""

from __future__ import annotations

import json
import os
import re
import threading
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Optional, Sequence, Union

from .errors import (
    BadMagic,
    BiolockError,
    CorruptManifest,
    DuplicateSubject,
    EmptyDatabase,
    EmptyEnrollment,
    MissingTemplateFile,
    NoProbe,
    NoScores,
    PipelineFailure,
    TruncatedData,
    UnknownSubject,
)
from .fingerprint import (
    FingerprintTemplate,
    build_template,
    decode_template,
    encode_template,
    match_minutiae,
)
from .fusion import (
    CLASSIFIER_HAAR,
    CLASSIFIER_MELLIN,
    CLASSIFIER_MINUTIAE,
    GENUINE,
    TRAIT_FINGER,
    TRAIT_IRIS,
    ClassifierScore,
    FusedScore,
    FusionConfig,
    fuse_pipeline,
)
from .imaging import GrayImage
from .iris import (
    IrisCode,
    SCHEME_HAAR,
    SCHEME_MELLIN,
    build_codes,
    decode_code,
    encode_code,
    hamming_distance,
)

SUBJECT_ID_PATTERN = re.compile(r"^[A-Za-z0-9_-]{1,64}$")

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
AUDIT_LOG_NAME = "audit.log"

EVENT_ACCESS_GRANTED = "access_granted"
EVENT_ALARM = "alarm"
EVENT_ENROLL = "enroll"
EVENT_ERROR = "error"
EVENT_KINDS = (EVENT_ACCESS_GRANTED, EVENT_ALARM, EVENT_ENROLL, EVENT_ERROR)

ACCESS_UNLOCK = "unlock"
ACCESS_ALARM = "alarm"


def _validate_subject_id(subject_id: str) -> str:
    if not isinstance(subject_id, str) or not SUBJECT_ID_PATTERN.match(subject_id):
        raise ValueError(
            f"subject id must match [A-Za-z0-9_-]{{1,64}}, got {subject_id!r}"
        )
    return subject_id


@dataclass(frozen=True)
class IrisPair:
    """One eye's enrollment: a haar code and a mellin code of the same strip."""

    haar: IrisCode
    mellin: IrisCode

    def __post_init__(self) -> None:
        if not isinstance(self.haar, IrisCode) or self.haar.scheme != SCHEME_HAAR:
            raise ValueError("haar slot must hold a haar-scheme IrisCode")
        if not isinstance(self.mellin, IrisCode) or self.mellin.scheme != SCHEME_MELLIN:
            raise ValueError("mellin slot must hold a mellin-scheme IrisCode")


@dataclass(frozen=True)
class PersonRecord:
    """One enrolled subject: identifier, templates, and enrollment time."""

    subject_id: str
    fingerprints: tuple
    iris_codes: tuple
    enrolled_at: str

    def __post_init__(self) -> None:
        _validate_subject_id(self.subject_id)
        fingers = tuple(self.fingerprints)
        pairs = tuple(self.iris_codes)
        for template in fingers:
            if not isinstance(template, FingerprintTemplate):
                raise TypeError("fingerprints must hold FingerprintTemplate values")
        for pair in pairs:
            if not isinstance(pair, IrisPair):
                raise TypeError("iris_codes must hold IrisPair values")
        if not fingers and not pairs:
            raise ValueError("a record needs at least one fingerprint or iris pair")
        if not isinstance(self.enrolled_at, str) or not self.enrolled_at:
            raise ValueError("enrolled_at must be a non-empty timestamp string")
        object.__setattr__(self, "fingerprints", fingers)
        object.__setattr__(self, "iris_codes", pairs)


@dataclass(frozen=True)
class RankedMatch:
    """One identification hit: subject, final score, per-trait scores."""

    subject_id: str
    ms_final: float
    per_trait: tuple

    def __post_init__(self) -> None:
        _validate_subject_id(self.subject_id)
        object.__setattr__(self, "ms_final", float(self.ms_final))
        per_trait = tuple(self.per_trait)
        if len(per_trait) != 2:
            raise ValueError("per_trait must be a (ms_finger, ms_iris) pair")
        object.__setattr__(self, "per_trait", per_trait)


@dataclass(frozen=True)
class AuditEvent:
    """One audit-log line: timestamp, event kind, claim, score, free text."""

    ts: str
    kind: str
    claimed_id: str
    ms_final: float
    detail: str

    def __post_init__(self) -> None:
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"kind must be one of {EVENT_KINDS}, got {self.kind!r}")
        object.__setattr__(self, "ms_final", float(self.ms_final))


class TemplateDB:
    """In-memory view of a database directory.

    ``records`` maps subject id to :class:`PersonRecord` in enrollment order;
    the manifest entries (file names per subject) are kept alongside so new
    enrollments re-write the manifest without renaming existing files.
    """

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.records: dict = {}
        self._entries: dict = {}

    def __len__(self) -> int:
        return len(self.records)

    def __contains__(self, subject_id: str) -> bool:
        return subject_id in self.records


# ---------------------------------------------------------------------------
# Audit log

_TS_LOCK = threading.Lock()
_LAST_TS: dict = {}


class AuditLog:
    """Append-only JSON-lines event log with strictly increasing timestamps."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)

    def append(self, kind: str, claimed_id: str, ms_final: float, detail: str) -> AuditEvent:
        if isinstance(claimed_id, str) and SUBJECT_ID_PATTERN.match(claimed_id):
            recorded_id = claimed_id
        else:
            recorded_id = "-"
        key = os.path.abspath(str(self.path))
        with _TS_LOCK:
            now = datetime.now(timezone.utc)
            last = _LAST_TS.get(key)
            if last is not None and now <= last:
                now = last + timedelta(microseconds=1)
            _LAST_TS[key] = now
        event = AuditEvent(
            ts=now.isoformat(timespec="microseconds"),
            kind=kind,
            claimed_id=recorded_id,
            ms_final=float(ms_final),
            detail=str(detail),
        )
        line = json.dumps(
            {
                "ts": event.ts,
                "kind": event.kind,
                "claimed_id": event.claimed_id,
                "ms_final": event.ms_final,
                "detail": event.detail,
            }
        )
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")
        return event


def read_audit_log(path: Union[str, Path]) -> list:
    """Parse an audit log into events; a missing file reads as empty."""
    path = Path(path)
    if not path.exists():
        return []
    events = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
            events.append(
                AuditEvent(
                    ts=data["ts"],
                    kind=data["kind"],
                    claimed_id=data["claimed_id"],
                    ms_final=data["ms_final"],
                    detail=data["detail"],
                )
            )
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ValueError(f"{path}: line {lineno}: bad audit record: {exc}") from exc
    return events


def _audit_log_for(db: TemplateDB, audit_log) -> AuditLog:
    if audit_log is None:
        return AuditLog(db.path / AUDIT_LOG_NAME)
    if isinstance(audit_log, AuditLog):
        return audit_log
    return AuditLog(audit_log)


# ---------------------------------------------------------------------------
# Persistence

def _manifest_check(condition: bool, where: Path, message: str) -> None:
    if not condition:
        raise CorruptManifest(f"{where}: {message}")


def _load_bytes(db_path: Path, name: str) -> bytes:
    _manifest_check(isinstance(name, str) and name, db_path / MANIFEST_NAME,
                    f"bad file reference {name!r}")
    full = db_path / name
    if not full.is_file():
        raise MissingTemplateFile(str(full))
    return full.read_bytes()


def load_db(path: Union[str, Path]) -> TemplateDB:
    """Read a database directory; a missing manifest means an empty DB."""
    db = TemplateDB(path)
    manifest_path = db.path / MANIFEST_NAME
    if not manifest_path.is_file():
        return db
    try:
        data = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptManifest(f"{manifest_path}: {exc}") from exc
    _manifest_check(isinstance(data, dict), manifest_path, "top level must be an object")
    _manifest_check(data.get("version") == MANIFEST_VERSION, manifest_path,
                    f"unsupported version {data.get('version')!r}")
    subjects = data.get("subjects")
    _manifest_check(isinstance(subjects, list), manifest_path, "subjects must be a list")
    for entry in subjects:
        _manifest_check(isinstance(entry, dict), manifest_path, "subject entry must be an object")
        subject_id = entry.get("id")
        try:
            _validate_subject_id(subject_id)
        except ValueError as exc:
            raise CorruptManifest(f"{manifest_path}: {exc}") from exc
        _manifest_check(subject_id not in db.records, manifest_path,
                        f"duplicate subject {subject_id!r}")
        enrolled_at = entry.get("enrolled_at")
        _manifest_check(isinstance(enrolled_at, str) and bool(enrolled_at), manifest_path,
                        f"subject {subject_id!r}: bad enrolled_at")
        fingers_entry = entry.get("fingers", [])
        iris_entry = entry.get("iris", [])
        _manifest_check(isinstance(fingers_entry, list), manifest_path,
                        f"subject {subject_id!r}: fingers must be a list")
        _manifest_check(isinstance(iris_entry, list), manifest_path,
                        f"subject {subject_id!r}: iris must be a list")
        templates = []
        for name in fingers_entry:
            blob = _load_bytes(db.path, name)
            try:
                templates.append(decode_template(blob))
            except (BadMagic, TruncatedData) as exc:
                raise type(exc)(f"{db.path / name}: {exc}") from exc
        pairs = []
        for item in iris_entry:
            _manifest_check(isinstance(item, dict) and "haar" in item and "mellin" in item,
                            manifest_path,
                            f"subject {subject_id!r}: iris entry needs haar and mellin files")
            codes = {}
            for scheme, key in ((SCHEME_HAAR, "haar"), (SCHEME_MELLIN, "mellin")):
                blob = _load_bytes(db.path, item[key])
                try:
                    code = decode_code(blob)
                except (BadMagic, TruncatedData) as exc:
                    raise type(exc)(f"{db.path / item[key]}: {exc}") from exc
                _manifest_check(code.scheme == scheme, manifest_path,
                                f"{item[key]}: manifest lists a {scheme} code but the file holds {code.scheme}")
                codes[key] = code
            pairs.append(IrisPair(codes["haar"], codes["mellin"]))
        try:
            record = PersonRecord(subject_id, tuple(templates), tuple(pairs), enrolled_at)
        except (TypeError, ValueError) as exc:
            raise CorruptManifest(f"{manifest_path}: subject {subject_id!r}: {exc}") from exc
        db.records[subject_id] = record
        db._entries[subject_id] = {
            "id": subject_id,
            "enrolled_at": enrolled_at,
            "fingers": list(fingers_entry),
            "iris": [dict(item) for item in iris_entry],
        }
    return db


def _write_atomic(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _persist_record(db: TemplateDB, record: PersonRecord) -> None:
    db.path.mkdir(parents=True, exist_ok=True)
    written = []
    try:
        finger_names = []
        for i, template in enumerate(record.fingerprints):
            name = f"{record.subject_id}_finger_{i}.fpt"
            _write_atomic(db.path / name, encode_template(template))
            written.append(name)
            finger_names.append(name)
        iris_items = []
        for i, pair in enumerate(record.iris_codes):
            haar_name = f"{record.subject_id}_iris_{i}_haar.irc"
            mellin_name = f"{record.subject_id}_iris_{i}_mellin.irc"
            _write_atomic(db.path / haar_name, encode_code(pair.haar))
            written.append(haar_name)
            _write_atomic(db.path / mellin_name, encode_code(pair.mellin))
            written.append(mellin_name)
            iris_items.append({"haar": haar_name, "mellin": mellin_name})
        entry = {
            "id": record.subject_id,
            "enrolled_at": record.enrolled_at,
            "fingers": finger_names,
            "iris": iris_items,
        }
        manifest = {
            "version": MANIFEST_VERSION,
            "subjects": list(db._entries.values()) + [entry],
        }
        text = json.dumps(manifest, indent=2) + "\n"
        _write_atomic(db.path / MANIFEST_NAME, text.encode("utf-8"))
        db._entries[record.subject_id] = entry
    except BaseException:
        for name in written:
            try:
                (db.path / name).unlink()
            except OSError:
                pass
        raise


# ---------------------------------------------------------------------------
# Enrollment

_STAGE_BY_ERROR = {
    "NoPupilFound": "pupil-localization",
    "BoundaryNotFound": "iris-boundary",
}


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


def enroll(
    db: TemplateDB,
    subject_id: str,
    finger_images: Sequence[GrayImage] = (),
    iris_images: Sequence[GrayImage] = (),
    audit_log=None,
) -> PersonRecord:
    """Extract features from every image, persist them, log an enroll event.

    All feature extraction happens before anything is written, so a pipeline
    failure on any image leaves the database exactly as it was.
    """
    _validate_subject_id(subject_id)
    if subject_id in db.records:
        raise DuplicateSubject(f"duplicate subject: {subject_id!r} is already enrolled")
    finger_images = list(finger_images)
    iris_images = list(iris_images)
    if not finger_images and not iris_images:
        raise EmptyEnrollment("enrollment needs at least one finger or iris image")
    templates = []
    for i, img in enumerate(finger_images):
        try:
            templates.append(build_template(img))
        except BiolockError as exc:
            raise PipelineFailure("finger", i, "feature-extraction", exc) from exc
    pairs = []
    for i, img in enumerate(iris_images):
        try:
            _, _, haar, mellin = build_codes(img)
        except BiolockError as exc:
            stage = _STAGE_BY_ERROR.get(type(exc).__name__, "feature-extraction")
            raise PipelineFailure("iris", i, stage, exc) from exc
        pairs.append(IrisPair(haar, mellin))
    record = PersonRecord(subject_id, tuple(templates), tuple(pairs), _utc_now())
    _persist_record(db, record)
    db.records[subject_id] = record
    log = _audit_log_for(db, audit_log)
    log.append(
        EVENT_ENROLL,
        subject_id,
        -1.0,
        f"{len(templates)} finger, {len(pairs)} iris",
    )
    return record


# ---------------------------------------------------------------------------
# Matching

def _probe_features(probe_finger, probe_iris):
    probe_template = build_template(probe_finger) if probe_finger is not None else None
    probe_pair = None
    if probe_iris is not None:
        _, _, haar, mellin = build_codes(probe_iris)
        probe_pair = (haar, mellin)
    return probe_template, probe_pair


def _score_record(record: PersonRecord, probe_template, probe_pair,
                  cfg: FusionConfig) -> FusedScore:
    """Fuse the probe against one record (max over the record's templates)."""
    scores = []
    if probe_template is not None and record.fingerprints:
        best = max(match_minutiae(t, probe_template) for t in record.fingerprints)
        scores.append(
            ClassifierScore(TRAIT_FINGER, CLASSIFIER_MINUTIAE, best, is_distance=False)
        )
    if probe_pair is not None and record.iris_codes:
        probe_haar, probe_mellin = probe_pair
        best_pair = None
        best_value = None
        for pair in record.iris_codes:
            d_haar = hamming_distance(pair.haar, probe_haar)
            d_mellin = hamming_distance(pair.mellin, probe_mellin)
            iris_scores = [
                ClassifierScore(TRAIT_IRIS, CLASSIFIER_HAAR, d_haar, is_distance=True),
                ClassifierScore(TRAIT_IRIS, CLASSIFIER_MELLIN, d_mellin, is_distance=True),
            ]
            value = fuse_pipeline(iris_scores, cfg).ms_iris
            if best_value is None or value > best_value:
                best_value = value
                best_pair = (d_haar, d_mellin)
        scores.extend(
            [
                ClassifierScore(TRAIT_IRIS, CLASSIFIER_HAAR, best_pair[0], is_distance=True),
                ClassifierScore(TRAIT_IRIS, CLASSIFIER_MELLIN, best_pair[1], is_distance=True),
            ]
        )
    return fuse_pipeline(scores, cfg)


def verify(
    db: TemplateDB,
    claimed_id: str,
    probe_finger: Optional[GrayImage] = None,
    probe_iris: Optional[GrayImage] = None,
    cfg: Optional[FusionConfig] = None,
) -> FusedScore:
    """Score a probe against one claimed subject (1:1)."""
    if claimed_id not in db.records:
        raise UnknownSubject(f"subject {claimed_id!r} is not enrolled")
    if probe_finger is None and probe_iris is None:
        raise NoProbe("verification needs at least one probe image")
    cfg = cfg if cfg is not None else FusionConfig()
    probe_template, probe_pair = _probe_features(probe_finger, probe_iris)
    return _score_record(db.records[claimed_id], probe_template, probe_pair, cfg)


def identify(
    db: TemplateDB,
    probe_finger: Optional[GrayImage] = None,
    probe_iris: Optional[GrayImage] = None,
    cfg: Optional[FusionConfig] = None,
    top_k: int = 5,
) -> list:
    """Score a probe against every subject (1:N) and rank the results.

    Subjects sharing no trait with the probe are skipped (nothing to compare).
    Ties in ms_final rank by subject id ascending.
    """
    if not db.records:
        raise EmptyDatabase("no subjects enrolled")
    if probe_finger is None and probe_iris is None:
        raise NoProbe("identification needs at least one probe image")
    top_k = int(top_k)
    if top_k < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")
    cfg = cfg if cfg is not None else FusionConfig()
    probe_template, probe_pair = _probe_features(probe_finger, probe_iris)
    matches = []
    for subject_id, record in db.records.items():
        try:
            fused = _score_record(record, probe_template, probe_pair, cfg)
        except NoScores:
            continue
        matches.append(RankedMatch(subject_id, fused.ms_final,
                                   (fused.ms_finger, fused.ms_iris)))
    matches.sort(key=lambda m: (-m.ms_final, m.subject_id))
    return matches[:top_k]


def access(
    db: TemplateDB,
    claimed_id: str,
    probe_finger: Optional[GrayImage] = None,
    probe_iris: Optional[GrayImage] = None,
    cfg: Optional[FusionConfig] = None,
    audit_log=None,
) -> str:
    """Verify a claim and gate the door: unlock or alarm, always logged.

    The audit event is appended before the result is returned; errors append
    an ``error`` event and re-raise.
    """
    log = _audit_log_for(db, audit_log)
    try:
        fused = verify(db, claimed_id, probe_finger, probe_iris, cfg)
    except Exception as exc:
        log.append(EVENT_ERROR, claimed_id, -1.0, str(exc))
        raise
    detail = "ms_finger={} ms_iris={}".format(
        "-" if fused.ms_finger is None else f"{fused.ms_finger:.6f}",
        "-" if fused.ms_iris is None else f"{fused.ms_iris:.6f}",
    )
    if fused.decision == GENUINE:
        log.append(EVENT_ACCESS_GRANTED, claimed_id, fused.ms_final, detail)
        return ACCESS_UNLOCK
    log.append(EVENT_ALARM, claimed_id, fused.ms_final, detail)
    return ACCESS_ALARM
