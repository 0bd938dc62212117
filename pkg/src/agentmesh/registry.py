"""Gateway-side resource registry: registration, validation, metrics.

Entries become visible to retrieval only after a validation pass, and a
suspended entry is never visible regardless of its validation state. Every
mutation bumps ``generation`` (so search indexes know to rebuild) and
snapshots the registry to a JSON file when one is configured.
"""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

from ._util import now_ms, read_json, write_json_atomic
from .protocol import (
    ExecutionCommand,
    ExecutionResult,
    FieldType,
    Outcome,
    ResourceManifest,
    ResourceMetrics,
    ResourceStatus,
    SchemaField,
    from_payload,
    to_payload,
    validate_inputs,
    validate_manifest,
)
from .transport import Transport, TransportError

logger = logging.getLogger(__name__)

SNAPSHOT_VERSION = 1


class ValidationState(str, Enum):
    UNVALIDATED = "unvalidated"
    PASSED = "passed"
    FAILED = "failed"


class RegistryError(Exception):
    def __init__(self, code: str, message: str | None = None):
        super().__init__(message or code)
        self.code = code


@dataclass
class RegistryEntry:
    manifest: ResourceManifest
    registered_at: int
    validation: ValidationState = ValidationState.UNVALIDATED
    suspension_reason: str | None = None
    # monotonic revision markers: reinstate needs a validation pass that
    # happened after the most recent suspension
    validated_rev: int = 0
    suspended_rev: int = 0

    @property
    def suspended(self) -> bool:
        return self.manifest.status is ResourceStatus.SUSPENDED


@dataclass
class ValidationCheck:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class ValidationReport:
    resource_id: str
    checks: list[ValidationCheck] = field(default_factory=list)

    @property
    def overall(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[ValidationCheck]:
        return [c for c in self.checks if not c.passed]


_SAMPLE_VALUES = {
    FieldType.STRING: "sample",
    FieldType.INT: 1,
    FieldType.FLOAT: 1.0,
    FieldType.BOOL: True,
}


def sample_inputs(schema: list[SchemaField]) -> dict:
    """Schema-derived probe inputs for the registration echo check."""
    return {f.name: _SAMPLE_VALUES[f.type] for f in schema if f.required}


class Registry:
    """Store of manifests for one gateway. Mutations are serialized."""

    def __init__(
        self,
        snapshot_path: str | Path | None = None,
        transport: Transport | None = None,
        clock: Callable[[], int] = now_ms,
        probe_deadline_ms: int = 2_000,
    ):
        self._lock = threading.RLock()
        self._entries: dict[str, RegistryEntry] = {}
        self._snapshot_path = Path(snapshot_path) if snapshot_path else None
        self._transport = transport
        self._clock = clock
        self._probe_deadline_ms = probe_deadline_ms
        self._rev = 0
        self.generation = 0
        if self._snapshot_path and self._snapshot_path.exists():
            self._load()

    # -- queries ------------------------------------------------------------

    def get(self, resource_id: str) -> RegistryEntry:
        entry = self._entries.get(resource_id)
        if entry is None:
            raise RegistryError("unknown_resource", f"unknown resource: {resource_id}")
        return entry

    def __contains__(self, resource_id: str) -> bool:
        return resource_id in self._entries

    def entries(self) -> list[RegistryEntry]:
        return list(self._entries.values())

    def visible_manifests(self) -> list[ResourceManifest]:
        """Manifests eligible for retrieval: validated and not suspended."""
        return [
            e.manifest for e in self._entries.values()
            if e.validation is ValidationState.PASSED and not e.suspended
        ]

    # -- mutations ----------------------------------------------------------

    def register(self, manifest: ResourceManifest) -> RegistryEntry:
        violations = validate_manifest(manifest)
        if violations:
            raise RegistryError("invalid_manifest", "; ".join(violations))
        with self._lock:
            if manifest.resource_id in self._entries:
                raise RegistryError("duplicate_id", f"already registered: {manifest.resource_id}")
            manifest.status = ResourceStatus.ACTIVE
            entry = RegistryEntry(manifest=manifest, registered_at=self._clock())
            self._entries[manifest.resource_id] = entry
            self._mutated()
        return entry

    def validate(self, resource_id: str, transport: Transport | None = None) -> ValidationReport:
        """Run the live check suite; failure suspends the entry."""
        transport = transport or self._transport
        if transport is None:
            raise RegistryError("no_transport", "registry has no transport for validation")
        entry = self.get(resource_id)
        m = entry.manifest
        report = ValidationReport(resource_id=resource_id)
        command = ExecutionCommand(
            command_id=f"probe-{resource_id}-{self._clock()}",
            resource_id=resource_id,
            endpoint=m.endpoint,
            inputs=sample_inputs(m.input_schema),
            deadline_ms=self._probe_deadline_ms,
        )
        result: ExecutionResult | None = None
        try:
            result = transport.invoke(command)
            report.checks.append(ValidationCheck("connectivity", True))
        except TransportError as exc:
            report.checks.append(ValidationCheck("connectivity", False, str(exc)))

        if result is not None and result.outcome is Outcome.OK:
            schema_violations = validate_inputs(result.payload, m.output_schema)
            report.checks.append(ValidationCheck(
                "schema_echo", not schema_violations,
                "output schema mismatch: " + "; ".join(schema_violations) if schema_violations else ""))
            declared = {f.name for f in m.output_schema}
            missing = sorted(declared - set(result.payload))
            report.checks.append(ValidationCheck(
                "description_consistency", not missing,
                f"declared output fields absent from live response: {missing}" if missing else ""))
        elif result is not None:
            report.checks.append(ValidationCheck(
                "schema_echo", False, f"probe returned error: {result.error_message}"))

        with self._lock:
            self._rev += 1
            if report.overall:
                entry.validation = ValidationState.PASSED
                entry.validated_rev = self._rev
                entry.manifest.status = ResourceStatus.ACTIVE
                entry.suspension_reason = None
                entry.manifest.metrics.last_validated_at = self._clock()
            else:
                entry.validation = ValidationState.FAILED
                entry.manifest.status = ResourceStatus.SUSPENDED
                entry.suspended_rev = self._rev
                entry.suspension_reason = "; ".join(
                    c.detail or c.name for c in report.failures())
            self._mutated()
        return report

    def record_outcome(self, resource_id: str, result: ExecutionResult) -> ResourceMetrics:
        entry = self.get(resource_id)
        with self._lock:
            entry.manifest.metrics.record(result.outcome is Outcome.OK, result.elapsed_ms)
            self._mutated()
        return entry.manifest.metrics

    def suspend(self, resource_id: str, reason: str) -> RegistryEntry:
        entry = self.get(resource_id)
        with self._lock:
            self._rev += 1
            entry.manifest.status = ResourceStatus.SUSPENDED
            entry.suspension_reason = reason
            entry.suspended_rev = self._rev
            self._mutated()
        logger.info("suspended %s: %s", resource_id, reason)
        return entry

    def reinstate(self, resource_id: str) -> RegistryEntry:
        """Reactivate a suspended entry; needs a validation pass newer than
        the suspension."""
        entry = self.get(resource_id)
        with self._lock:
            if entry.validation is not ValidationState.PASSED or \
                    entry.validated_rev < entry.suspended_rev:
                raise RegistryError(
                    "reinstate_without_validation",
                    f"{resource_id} needs a passing validation after its suspension")
            entry.manifest.status = ResourceStatus.ACTIVE
            entry.suspension_reason = None
            self._mutated()
        return entry

    # -- persistence ----------------------------------------------------------

    def _mutated(self) -> None:
        self.generation += 1
        if self._snapshot_path is not None:
            self._save()

    def _save(self) -> None:
        doc = {
            "v": SNAPSHOT_VERSION,
            "rev": self._rev,
            "entries": [
                {
                    "manifest": to_payload(e.manifest),
                    "registered_at": e.registered_at,
                    "validation": e.validation.value,
                    "suspension_reason": e.suspension_reason,
                    "validated_rev": e.validated_rev,
                    "suspended_rev": e.suspended_rev,
                }
                for e in self._entries.values()
            ],
        }
        write_json_atomic(self._snapshot_path, doc)

    def _load(self) -> None:
        doc = read_json(self._snapshot_path)
        if doc.get("v") != SNAPSHOT_VERSION:
            raise RegistryError("bad_snapshot", f"unsupported snapshot version: {doc.get('v')}")
        self._rev = doc.get("rev", 0)
        for item in doc["entries"]:
            manifest = from_payload("resource_manifest", item["manifest"])
            self._entries[manifest.resource_id] = RegistryEntry(
                manifest=manifest,
                registered_at=item["registered_at"],
                validation=ValidationState(item["validation"]),
                suspension_reason=item["suspension_reason"],
                validated_rev=item.get("validated_rev", 0),
                suspended_rev=item.get("suspended_rev", 0),
            )
