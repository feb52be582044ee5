"""Shared fixture for the 2^7 authorization condition matrix.

Builds a registry where all seven decision conditions hold, plus one
independent "breaker" per condition, so every subset of conditions can be
falsified at once. The brute-force oracle evaluates each predicate
directly and independently of the registry's sequential check path.
"""

from __future__ import annotations

from dataclasses import dataclass

from regctl import Basis, Decision, Deployment, DenyReason, Scope
from regctl import crypto

CONDITION_ORDER = (
    DenyReason.EXISTENCE,
    DenyReason.STATUS,
    DenyReason.WINDOW,
    DenyReason.SCOPE,
    DenyReason.PURPOSE_MATCH,
    DenyReason.MANIFEST,
    DenyReason.CONSENT,
)


@dataclass
class Matrix:
    dep: Deployment
    auth_id: str
    revoked_auth_id: str
    good_digest: bytes
    subject_vid: str
    purpose: str

    def arguments(self, bits: int) -> dict:
        """Call arguments for ``check`` with condition i true iff bit i is set.

        Bit order follows CONDITION_ORDER. Breakers are independent: each
        manipulates a different argument or state slice.
        """
        existence, status, window, scope_ok, purpose_ok, manifest_ok, consent_ok = (
            bool(bits & (1 << i)) for i in range(7)
        )
        auth_id = self.auth_id if existence else "A99999"
        if not status:
            auth_id = self.revoked_auth_id if existence else "A99999"
        now = 50 if window else 5000
        classes = ("health",) if scope_ok else ("health", "financial")
        purpose = self.purpose if purpose_ok else "WRONG_PURPOSE"
        digest = self.good_digest if manifest_ok else crypto.sha256(b"unregistered artifact")
        subject = self.subject_vid if consent_ok else "00000000000000000000"
        return {
            "auth_id": auth_id,
            "program_digest": digest,
            "requested_scope": Scope("health", classes, "read"),
            "purpose_code": purpose,
            "subject_vid": subject,
            "now": now,
        }

    def check(self, bits: int) -> Decision:
        return self.dep.registry.check(**self.arguments(bits))

    def oracle(self, bits: int) -> Decision:
        """Independent conjunction: evaluate all 7 predicates, first false wins."""
        args = self.arguments(bits)
        registry = self.dep.registry
        auth = registry.authorizations.get(args["auth_id"])
        manifest = registry.manifests_by_digest.get(args["program_digest"])
        requested = args["requested_scope"]

        predicates = [
            auth is not None,
            auth is not None and auth.status.value == "Active",
            auth is not None and auth.valid_from <= args["now"] < auth.valid_until,
            auth is not None
            and auth.scope.domain == requested.domain
            and auth.scope.operation == requested.operation
            and set(requested.field_classes) <= set(auth.scope.field_classes),
            auth is not None
            and args["purpose_code"] == auth.purpose_code
            and (manifest is None or args["purpose_code"] == manifest.declared_purpose),
            manifest is not None
            and crypto.verify(registry.regulator, manifest.signing_payload(), manifest.signature)
            and manifest.allowed_scope.domain == requested.domain
            and manifest.allowed_scope.operation == requested.operation
            and set(requested.field_classes) <= set(manifest.allowed_scope.field_classes),
            auth is None
            or auth.basis.value == "Legal"
            or registry.has_live_consent(args["subject_vid"], args["purpose_code"]),
        ]
        for reason, holds in zip(CONDITION_ORDER, predicates):
            if not holds:
                return Decision.deny(reason)
        return Decision.allow()


def build_matrix(seed: int = 171) -> Matrix:
    dep = Deployment(seed=seed)
    dep.vault.register_domain("health")
    master = dep.vault.register_master({"name": "matrix subject"})
    from regctl.deploy import REGISTRY_DOMAIN
    subject_vid = dep.vault.derive_vid(master, REGISTRY_DOMAIN).vid

    dep.registry.register_purpose("MATRIX_AUDIT", "condition matrix")
    dep.registry.register_purpose("WRONG_PURPOSE", "never granted")
    # manifest scope is wide so the scope breaker only trips the grant check
    dep.registry.sign_program(
        "p-matrix", b"matrix program", "MATRIX_AUDIT",
        Scope("health", ("health", "financial", "other"), "read"))
    digest = dep.registry.manifests["p-matrix"].content_digest
    auth = dep.registry.grant(dep.controller.key_id, Scope("health", ("health",), "read"),
                              "MATRIX_AUDIT", Basis.CONSENT, 0, 100)
    revoked = dep.registry.grant(dep.controller.key_id, Scope("health", ("health",), "read"),
                                 "MATRIX_AUDIT", Basis.CONSENT, 0, 100)
    dep.registry.revoke(revoked.auth_id)
    dep.registry.record_consent(subject_vid, "MATRIX_AUDIT")
    return Matrix(dep=dep, auth_id=auth.auth_id, revoked_auth_id=revoked.auth_id,
                  good_digest=digest, subject_vid=subject_vid, purpose="MATRIX_AUDIT")
