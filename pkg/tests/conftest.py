from __future__ import annotations

import pytest

from regctl import AccessRequest, Basis, Deployment, Scope, SiloSchema
from regctl.deploy import REGISTRY_DOMAIN


@pytest.fixture
def deployment() -> Deployment:
    return Deployment(seed=42)


@pytest.fixture
def populated(deployment: Deployment):
    """A small working world: one silo, one consented subject, one program."""
    dep = deployment
    dep.create_silo(SiloSchema(domain="health",
                               field_classes=(("bp", "health"), ("visits", "other"))))
    master = dep.vault.register_master(
        {"name": "SENTINEL-ASHA-RAU-4711", "address": "SENTINEL-5-FERN-COURT",
         "real_phone": "0088776655"})
    vid = dep.vault.derive_vid(master, "health").vid
    registry_vid = dep.vault.derive_vid(master, REGISTRY_DOMAIN).vid
    dep.registry.register_purpose("CARE_AUDIT", "clinical care quality audit")
    artifact = b"care-audit program build 14"
    manifest = dep.registry.sign_program(
        "p-care", artifact, "CARE_AUDIT", Scope("health", ("health", "other"), "read"))
    auth = dep.registry.grant(dep.controller.key_id, Scope("health", ("health", "other"), "read"),
                              "CARE_AUDIT", Basis.CONSENT, 0, 10_000)
    dep.registry.record_consent(registry_vid, "CARE_AUDIT")
    record_id = dep.silos["health"].put_record(vid, {"bp": "120/80", "visits": "3"})
    return {
        "dep": dep, "master": master, "vid": vid, "registry_vid": registry_vid,
        "artifact": artifact, "manifest": manifest, "auth": auth, "record_id": record_id,
    }


def make_request(dep: Deployment, populated: dict, request_id: str = "q1",
                 subjects: list[str] | None = None, classes: tuple[str, ...] = ("health", "other"),
                 purpose: str = "CARE_AUDIT", digest: bytes | None = None,
                 auth_id: str | None = None, operation: str = "read",
                 timestamp: int | None = None, nonce: bytes | None = None) -> AccessRequest:
    return AccessRequest.build(
        controller=dep.controller,
        request_id=request_id,
        program_id="p-care",
        content_digest=digest if digest is not None else populated["manifest"].content_digest,
        auth_id=auth_id or populated["auth"].auth_id,
        domain="health",
        operation=operation,
        subject_vids=subjects if subjects is not None else [populated["vid"]],
        requested_fields=list(classes),
        purpose_code=purpose,
        timestamp=timestamp if timestamp is not None else dep.clock.now(),
        nonce=nonce if nonce is not None else dep.rand_bytes(16),
    )
