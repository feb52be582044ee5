"""Authorization registry: the regulator's rulebook.

Holds purpose codes, regulator-signed authorizations and program manifests,
and per-subject consent records, and answers the single question every
access decision reduces to: is this (authorization, program, scope,
purpose, subject) combination allowed right now?

``check`` evaluates seven conditions in a fixed order and denies with the
first failure, so decisions are deterministic and auditable:

    Existence, Status, Window, Scope, PurposeMatch, Manifest, Consent

State mutations append to a signed journal that can be replayed to rebuild
the registry byte-for-byte.
"""

from __future__ import annotations

import base64
import enum
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from . import crypto
from .clock import Clock
from .crypto import SigningIdentity
from .errors import (
    DuplicatePurpose,
    EncodingError,
    InvalidWindow,
    NoConsentToWithdraw,
    NotFound,
    RegctlError,
    UnknownPurpose,
)
from .events import EventKind, EventLog

OPERATIONS = ("read", "resolve", "link", "mine")
FIELD_CLASSES = ("demographic", "financial", "health", "contact", "other")


@dataclass(frozen=True)
class Scope:
    """What an authorization covers: one domain, field classes, one operation."""

    domain: str
    field_classes: tuple[str, ...]
    operation: str

    def __post_init__(self):
        object.__setattr__(self, "field_classes", tuple(sorted(set(self.field_classes))))
        if self.operation not in OPERATIONS:
            raise RegctlError(f"unknown operation: {self.operation}")
        for fc in self.field_classes:
            if fc not in FIELD_CLASSES:
                raise RegctlError(f"unknown field class: {fc}")

    def covers(self, requested: "Scope") -> bool:
        return (
            self.domain == requested.domain
            and self.operation == requested.operation
            and set(requested.field_classes) <= set(self.field_classes)
        )

    def canonical_fields(self) -> list:
        return [self.domain, self.operation, len(self.field_classes), *self.field_classes]

    def render(self) -> str:
        return f"{self.domain}/{self.operation}/{'+'.join(self.field_classes) or '-'}"


class Basis(enum.Enum):
    LEGAL = "Legal"
    CONSENT = "Consent"


class AuthStatus(enum.Enum):
    ACTIVE = "Active"
    PENDING_CONSENT = "PendingConsent"
    REVOKED = "Revoked"


class DenyReason(enum.Enum):
    EXISTENCE = "Existence"
    STATUS = "Status"
    WINDOW = "Window"
    SCOPE = "Scope"
    PURPOSE_MATCH = "PurposeMatch"
    MANIFEST = "Manifest"
    CONSENT = "Consent"
    # gate-level reasons
    SIGNATURE = "Signature"
    STALE = "Stale"
    REPLAY = "Replay"


@dataclass(frozen=True)
class Decision:
    allowed: bool
    reason: DenyReason | None = None

    @classmethod
    def allow(cls) -> "Decision":
        return cls(True)

    @classmethod
    def deny(cls, reason: DenyReason) -> "Decision":
        return cls(False, reason)

    def __str__(self) -> str:
        return "Allow" if self.allowed else f"Deny({self.reason.value})"


@dataclass
class Authorization:
    auth_id: str
    grantee_key_id: str
    scope: Scope
    purpose_code: str
    basis: Basis
    valid_from: int
    valid_until: int
    status: AuthStatus
    signature: bytes

    def signing_payload(self) -> bytes:
        return crypto.canon_encode(
            "AUTHv1",
            [self.auth_id, self.grantee_key_id, *self.scope.canonical_fields(),
             self.purpose_code, self.basis.value, self.valid_from, self.valid_until],
        )


@dataclass
class ProgramManifest:
    program_id: str
    content_digest: bytes
    declared_purpose: str
    allowed_scope: Scope
    signature: bytes

    def signing_payload(self) -> bytes:
        return crypto.canon_encode(
            "MANIv1",
            [self.program_id, self.content_digest, self.declared_purpose,
             *self.allowed_scope.canonical_fields()],
        )


@dataclass
class ConsentRecord:
    subject_vid: str
    purpose_code: str
    granted_at: int
    renewed_at: int | None = None
    opted_out_at: int | None = None
    deletion_proof: bytes | None = None

    def live(self) -> bool:
        return self.opted_out_at is None


@dataclass(frozen=True)
class DeletionObligation:
    """Regulator-signed instruction to erase one subject's data in one silo."""

    obligation_id: str
    subject_vid: str  # registry-domain vid
    purpose_code: str
    domain: str
    created_at: int
    signature: bytes

    def signing_payload(self) -> bytes:
        return crypto.canon_encode(
            "OBLv1",
            [self.obligation_id, self.subject_vid, self.purpose_code,
             self.domain, self.created_at],
        )


@dataclass(frozen=True)
class DeletionProof:
    """Dual-signed digest of the record ids destroyed for one obligation."""

    obligation_id: str
    domain: str
    record_ids: tuple[str, ...]
    proof_hash: bytes
    regulator_signature: bytes
    controller_signature: bytes

    @staticmethod
    def hash_record_ids(record_ids: list[str]) -> bytes:
        ids = sorted(record_ids)
        return crypto.sha256(crypto.canon_encode("DELv1", [len(ids), *ids]))

    def signing_payload(self) -> bytes:
        return crypto.canon_encode("DELv1", [self.obligation_id, self.domain, self.proof_hash])

    def verify(self, regulator: SigningIdentity, controller: SigningIdentity) -> bool:
        if self.proof_hash != self.hash_record_ids(list(self.record_ids)):
            return False
        payload = self.signing_payload()
        return crypto.verify(regulator, payload, self.regulator_signature) and crypto.verify(
            controller, payload, self.controller_signature
        )


# ---------------------------------------------------------------------------
# Registry service
# ---------------------------------------------------------------------------

@dataclass
class _JournalRecord:
    seq: int
    kind: str
    payload: dict
    signature: bytes


class Registry:
    def __init__(self, regulator: SigningIdentity, clock: Clock,
                 event_log: EventLog | None = None,
                 subjects_in_scope: Callable[[Scope], list[str]] | None = None):
        self.regulator = regulator
        self.clock = clock
        self.event_log = event_log
        self.subjects_in_scope = subjects_in_scope
        self.purposes: dict[str, str] = {}
        self.manifests: dict[str, ProgramManifest] = {}
        self.manifests_by_digest: dict[bytes, ProgramManifest] = {}
        self.authorizations: dict[str, Authorization] = {}
        self.consents: dict[tuple[str, str], list[ConsentRecord]] = {}
        self.obligations: dict[str, DeletionObligation] = {}
        self.deletion_proofs: list[DeletionProof] = []
        self.journal: list[_JournalRecord] = []
        self._auth_counter = 0
        self._obligation_counter = 0
        self._lock = threading.Lock()

    # -- journal ---------------------------------------------------------------

    def _journal(self, kind: str, payload: dict) -> None:
        seq = len(self.journal)
        body = json.dumps(payload, sort_keys=True).encode("utf-8")
        signature = crypto.sign(self.regulator, crypto.canon_encode("RECv1", [seq, kind, body]))
        self.journal.append(_JournalRecord(seq, kind, payload, signature))

    def save(self, path: Path) -> None:
        lines = []
        for rec in self.journal:
            body = json.dumps(rec.payload, sort_keys=True).encode("utf-8")
            blob = crypto.canon_encode("RECv1", [rec.seq, rec.kind, body, rec.signature])
            lines.append(base64.b64encode(blob).decode("ascii"))
        path.write_text("".join(line + "\n" for line in lines))

    def load(self, path: Path) -> None:
        """Replay a signed journal file into a fresh registry."""
        if not path.exists():
            return
        for line in path.read_text().splitlines():
            tag, fields = crypto.canon_decode(base64.b64decode(line))
            if tag != "RECv1" or len(fields) != 4:
                raise EncodingError("bad registry journal record")
            seq = crypto.decode_int(fields[0])
            kind = crypto.decode_str(fields[1])
            body, signature = fields[2], fields[3]
            if not crypto.verify(self.regulator, crypto.canon_encode("RECv1", [seq, kind, body]), signature):
                raise EncodingError(f"registry journal record {seq} signature invalid")
            payload = json.loads(body)
            self._apply(kind, payload)
            self.journal.append(_JournalRecord(seq, kind, payload, signature))

    def _apply(self, kind: str, p: dict) -> None:
        if kind == "purpose":
            self.purposes[p["code"]] = p["description"]
        elif kind == "manifest":
            manifest = ProgramManifest(
                program_id=p["program_id"],
                content_digest=bytes.fromhex(p["content_digest"]),
                declared_purpose=p["declared_purpose"],
                allowed_scope=_scope_from_dict(p["allowed_scope"]),
                signature=bytes.fromhex(p["signature"]),
            )
            self.manifests[manifest.program_id] = manifest
            self.manifests_by_digest[manifest.content_digest] = manifest
        elif kind == "auth":
            auth = Authorization(
                auth_id=p["auth_id"],
                grantee_key_id=p["grantee_key_id"],
                scope=_scope_from_dict(p["scope"]),
                purpose_code=p["purpose_code"],
                basis=Basis(p["basis"]),
                valid_from=p["valid_from"],
                valid_until=p["valid_until"],
                status=AuthStatus(p["status"]),
                signature=bytes.fromhex(p["signature"]),
            )
            self.authorizations[auth.auth_id] = auth
            self._auth_counter = max(self._auth_counter, int(auth.auth_id[1:]))
        elif kind == "auth-status":
            self.authorizations[p["auth_id"]].status = AuthStatus(p["status"])
        elif kind == "consent":
            self._consent_list(p["subject_vid"], p["purpose_code"]).append(
                ConsentRecord(p["subject_vid"], p["purpose_code"], p["granted_at"])
            )
        elif kind == "renewal":
            records = self._consent_list(p["subject_vid"], p["purpose_code"])
            if records and records[-1].live():
                records[-1].renewed_at = p["renewed_at"]
            else:
                records.append(
                    ConsentRecord(p["subject_vid"], p["purpose_code"],
                                  p["renewed_at"], renewed_at=p["renewed_at"])
                )
        elif kind == "optout":
            records = self._consent_list(p["subject_vid"], p["purpose_code"])
            records[-1].opted_out_at = p["opted_out_at"]
        elif kind == "obligation":
            obligation = DeletionObligation(
                obligation_id=p["obligation_id"],
                subject_vid=p["subject_vid"],
                purpose_code=p["purpose_code"],
                domain=p["domain"],
                created_at=p["created_at"],
                signature=bytes.fromhex(p["signature"]),
            )
            self.obligations[obligation.obligation_id] = obligation
            self._obligation_counter = max(self._obligation_counter, int(obligation.obligation_id[1:]))
        elif kind == "proof":
            proof = DeletionProof(
                obligation_id=p["obligation_id"],
                domain=p["domain"],
                record_ids=tuple(p["record_ids"]),
                proof_hash=bytes.fromhex(p["proof_hash"]),
                regulator_signature=bytes.fromhex(p["regulator_signature"]),
                controller_signature=bytes.fromhex(p["controller_signature"]),
            )
            self.deletion_proofs.append(proof)
            records = self._consent_list(p["subject_vid"], p["purpose_code"])
            if records:
                records[-1].deletion_proof = proof.proof_hash
        else:
            raise EncodingError(f"unknown journal record kind: {kind}")

    def _consent_list(self, subject_vid: str, purpose_code: str) -> list[ConsentRecord]:
        return self.consents.setdefault((subject_vid, purpose_code), [])

    # -- purposes and programs ---------------------------------------------------

    def register_purpose(self, code: str, description: str) -> None:
        with self._lock:
            if code in self.purposes:
                raise DuplicatePurpose(f"purpose {code} already registered")
            self.purposes[code] = description
            self._journal("purpose", {"code": code, "description": description})

    def sign_program(self, program_id: str, artifact: bytes, declared_purpose: str,
                     allowed_scope: Scope) -> ProgramManifest:
        with self._lock:
            if declared_purpose not in self.purposes:
                raise UnknownPurpose(f"purpose {declared_purpose} not registered")
            if program_id in self.manifests:
                raise RegctlError(f"program {program_id} already has a manifest")
            manifest = ProgramManifest(
                program_id=program_id,
                content_digest=crypto.sha256(artifact),
                declared_purpose=declared_purpose,
                allowed_scope=allowed_scope,
                signature=b"",
            )
            manifest.signature = crypto.sign(self.regulator, manifest.signing_payload())
            self.manifests[program_id] = manifest
            self.manifests_by_digest[manifest.content_digest] = manifest
            self._journal("manifest", {
                "program_id": program_id,
                "content_digest": manifest.content_digest.hex(),
                "declared_purpose": declared_purpose,
                "allowed_scope": _scope_to_dict(allowed_scope),
                "signature": manifest.signature.hex(),
            })
            return manifest

    # -- grants ----------------------------------------------------------------

    def grant(self, grantee_key_id: str, scope: Scope, purpose_code: str, basis: Basis,
              valid_from: int, valid_until: int) -> Authorization:
        with self._lock:
            if purpose_code not in self.purposes:
                raise UnknownPurpose(f"purpose {purpose_code} not registered")
            if valid_from >= valid_until:
                raise InvalidWindow(f"window [{valid_from}, {valid_until}) is inverted")
            return self._store_auth(grantee_key_id, scope, purpose_code, basis,
                                    valid_from, valid_until, AuthStatus.ACTIVE)

    def _store_auth(self, grantee_key_id: str, scope: Scope, purpose_code: str, basis: Basis,
                    valid_from: int, valid_until: int, status: AuthStatus) -> Authorization:
        self._auth_counter += 1
        auth = Authorization(
            auth_id=f"A{self._auth_counter:05d}",
            grantee_key_id=grantee_key_id,
            scope=scope,
            purpose_code=purpose_code,
            basis=basis,
            valid_from=valid_from,
            valid_until=valid_until,
            status=status,
            signature=b"",
        )
        auth.signature = crypto.sign(self.regulator, auth.signing_payload())
        self.authorizations[auth.auth_id] = auth
        self._journal("auth", {
            "auth_id": auth.auth_id,
            "grantee_key_id": grantee_key_id,
            "scope": _scope_to_dict(scope),
            "purpose_code": purpose_code,
            "basis": basis.value,
            "valid_from": valid_from,
            "valid_until": valid_until,
            "status": status.value,
            "signature": auth.signature.hex(),
        })
        return auth

    def revoke(self, auth_id: str) -> None:
        with self._lock:
            auth = self.authorizations.get(auth_id)
            if auth is None:
                raise NotFound(f"authorization {auth_id} not found")
            auth.status = AuthStatus.REVOKED
            self._journal("auth-status", {"auth_id": auth_id, "status": "Revoked"})

    def extend_purpose(self, auth_id: str, new_purpose_code: str) -> Authorization:
        """Create a new authorization for an extended purpose.

        Legal basis: active immediately. Consent basis: pending until the
        first subject renews. Either way every affected subject is told.
        """
        with self._lock:
            original = self.authorizations.get(auth_id)
            if original is None:
                raise NotFound(f"authorization {auth_id} not found")
            if original.status != AuthStatus.ACTIVE:
                raise RegctlError(f"authorization {auth_id} is not Active")
            if new_purpose_code not in self.purposes:
                raise UnknownPurpose(f"purpose {new_purpose_code} not registered")
            status = AuthStatus.ACTIVE if original.basis == Basis.LEGAL else AuthStatus.PENDING_CONSENT
            auth = self._store_auth(original.grantee_key_id, original.scope, new_purpose_code,
                                    original.basis, original.valid_from, original.valid_until, status)
        affected = self.subjects_in_scope(original.scope) if self.subjects_in_scope else []
        if self.event_log is not None:
            summary = (f"purpose extension {original.purpose_code}->{new_purpose_code} "
                       f"scope={original.scope.render()} grantee={original.grantee_key_id} "
                       f"basis={original.basis.value}")
            self.event_log.record(EventKind.EXTENSION, auth.auth_id, sorted(affected), summary)
        return auth

    # -- consent ---------------------------------------------------------------

    def record_consent(self, subject_vid: str, purpose_code: str) -> ConsentRecord:
        with self._lock:
            if purpose_code not in self.purposes:
                raise UnknownPurpose(f"purpose {purpose_code} not registered")
            now = self.clock.now()
            record = ConsentRecord(subject_vid, purpose_code, granted_at=now)
            self._consent_list(subject_vid, purpose_code).append(record)
            self._journal("consent", {"subject_vid": subject_vid, "purpose_code": purpose_code,
                                      "granted_at": now})
            return record

    def record_consent_renewal(self, subject_vid: str, purpose_code: str) -> ConsentRecord:
        with self._lock:
            if purpose_code not in self.purposes:
                raise UnknownPurpose(f"purpose {purpose_code} not registered")
            now = self.clock.now()
            records = self._consent_list(subject_vid, purpose_code)
            if records and records[-1].live():
                records[-1].renewed_at = now
                record = records[-1]
            else:
                record = ConsentRecord(subject_vid, purpose_code, granted_at=now, renewed_at=now)
                records.append(record)
            # first renewal activates any authorization waiting on this purpose
            for auth in self.authorizations.values():
                if auth.purpose_code == purpose_code and auth.status == AuthStatus.PENDING_CONSENT:
                    auth.status = AuthStatus.ACTIVE
                    self._journal("auth-status", {"auth_id": auth.auth_id, "status": "Active"})
            self._journal("renewal", {"subject_vid": subject_vid, "purpose_code": purpose_code,
                                      "renewed_at": now})
            return record

    def opt_out(self, subject_vid: str, purpose_code: str) -> ConsentRecord:
        with self._lock:
            records = self._consent_list(subject_vid, purpose_code)
            if not records or not records[-1].live():
                raise NoConsentToWithdraw(f"no live consent for ({subject_vid}, {purpose_code})")
            now = self.clock.now()
            records[-1].opted_out_at = now
            self._journal("optout", {"subject_vid": subject_vid, "purpose_code": purpose_code,
                                     "opted_out_at": now})
            return records[-1]

    def has_live_consent(self, subject_vid: str, purpose_code: str) -> bool:
        records = self.consents.get((subject_vid, purpose_code), [])
        return bool(records) and records[-1].live()

    # -- deletion obligations ------------------------------------------------------

    def issue_deletion_obligation(self, subject_vid: str, purpose_code: str, domain: str) -> DeletionObligation:
        with self._lock:
            self._obligation_counter += 1
            obligation = DeletionObligation(
                obligation_id=f"D{self._obligation_counter:05d}",
                subject_vid=subject_vid,
                purpose_code=purpose_code,
                domain=domain,
                created_at=self.clock.now(),
                signature=b"",
            )
            signature = crypto.sign(self.regulator, obligation.signing_payload())
            obligation = DeletionObligation(
                obligation.obligation_id, subject_vid, purpose_code, domain,
                obligation.created_at, signature,
            )
            self.obligations[obligation.obligation_id] = obligation
            self._journal("obligation", {
                "obligation_id": obligation.obligation_id,
                "subject_vid": subject_vid,
                "purpose_code": purpose_code,
                "domain": domain,
                "created_at": obligation.created_at,
                "signature": signature.hex(),
            })
            return obligation

    def attach_deletion_proof(self, subject_vid: str, purpose_code: str, proof: DeletionProof) -> None:
        with self._lock:
            self.deletion_proofs.append(proof)
            records = self._consent_list(subject_vid, purpose_code)
            if records:
                records[-1].deletion_proof = proof.proof_hash
            self._journal("proof", {
                "obligation_id": proof.obligation_id,
                "domain": proof.domain,
                "record_ids": list(proof.record_ids),
                "proof_hash": proof.proof_hash.hex(),
                "regulator_signature": proof.regulator_signature.hex(),
                "controller_signature": proof.controller_signature.hex(),
                "subject_vid": subject_vid,
                "purpose_code": purpose_code,
            })

    # -- the decision ------------------------------------------------------------

    def check(self, auth_id: str, program_digest: bytes, requested_scope: Scope,
              purpose_code: str, subject_vid: str, now: int) -> Decision:
        """Decide one access. Pure given registry state; first failure wins.

        ``subject_vid`` is the subject's vid in the registry's own domain
        (consent records are keyed by it).
        """
        auth = self.authorizations.get(auth_id)
        if auth is None:
            return Decision.deny(DenyReason.EXISTENCE)
        if auth.status != AuthStatus.ACTIVE:
            return Decision.deny(DenyReason.STATUS)
        if not (auth.valid_from <= now < auth.valid_until):
            return Decision.deny(DenyReason.WINDOW)
        if not auth.scope.covers(requested_scope):
            return Decision.deny(DenyReason.SCOPE)
        manifest = self.manifests_by_digest.get(program_digest)
        if purpose_code != auth.purpose_code or (
            manifest is not None and purpose_code != manifest.declared_purpose
        ):
            return Decision.deny(DenyReason.PURPOSE_MATCH)
        if (
            manifest is None
            or not crypto.verify(self.regulator, manifest.signing_payload(), manifest.signature)
            or not manifest.allowed_scope.covers(requested_scope)
        ):
            return Decision.deny(DenyReason.MANIFEST)
        if auth.basis == Basis.CONSENT and not self.has_live_consent(subject_vid, purpose_code):
            return Decision.deny(DenyReason.CONSENT)
        return Decision.allow()

    def verify_stored_objects(self) -> bool:
        """All stored authorizations and manifests must verify under the regulator key."""
        for auth in self.authorizations.values():
            if not crypto.verify(self.regulator, auth.signing_payload(), auth.signature):
                return False
        for manifest in self.manifests.values():
            if not crypto.verify(self.regulator, manifest.signing_payload(), manifest.signature):
                return False
        return True


def _scope_to_dict(scope: Scope) -> dict:
    return {"domain": scope.domain, "field_classes": list(scope.field_classes),
            "operation": scope.operation}


def _scope_from_dict(d: dict) -> Scope:
    return Scope(domain=d["domain"], field_classes=tuple(d["field_classes"]),
                 operation=d["operation"])
