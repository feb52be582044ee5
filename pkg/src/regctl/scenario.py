"""Scenario harness: drives end-to-end runs and adversarial probes.

Scenarios are line-oriented text: one step per line, ``KEYWORD [handle]
key=value ...``, ``#`` comments. Steps may only reference handles declared
on earlier lines, time is logical (each step advances the clock one tick),
and a fixed seed determines every byte of randomness, so a run's report is
reproducible bit for bit.

After the steps execute, the runner applies any deferred attacks and then
checks the global invariants: both ledger chains verify, the pair
cross-verifies, accesses are in bijection with notifications, no planted
sentinel value appears in any non-vault persisted byte, every record
resists single-share decryption, every plaintext release consumed a
ticket, and every attack was caught.
"""

from __future__ import annotations

import base64
import shlex
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from . import crypto
from .crypto import Holder, KeyShare
from .deploy import REGISTRY_DOMAIN, Deployment
from .errors import (
    DecryptFailure,
    InsufficientPopulation,
    RegctlError,
    ScenarioReferenceError,
    ScenarioSyntaxError,
    TicketInvalid,
    WeakIdentifierRejected,
)
from .gate import AccessRequest, AccessTicket
from .ledger import Ledger, cross_verify
from .registry import Basis, DenyReason, Scope
from .silo import SiloSchema, record_aad
from .vault import derive_vid_value

ATTACK_KINDS = (
    "CrossSiloLink",
    "ReplayRequest",
    "TamperProgram",
    "TruncateLedger",
    "ForgeTicket",
    "AccessAfterOptOut",
    "WeakIdSmuggle",
)

_KEYWORDS = {
    "DOMAIN", "MASTER", "SILO", "PURPOSE", "PROGRAM", "GRANT", "REVOKE",
    "CONSENT", "RENEW", "OPTOUT", "PUT", "SUBMIT", "OPEN", "EXTEND",
    "RESOLVE", "LINK", "ALIAS", "ROUTE", "TICK", "ATTACK",
}

_REQUIRED_ARGS = {
    "SILO": ("domain", "fields"),
    "PROGRAM": ("purpose", "domain", "classes", "op"),
    "GRANT": ("grantee", "domain", "classes", "op", "purpose", "basis", "from", "until"),
    "CONSENT": ("purpose",),
    "RENEW": ("purpose",),
    "OPTOUT": ("purpose",),
    "PUT": ("silo", "master"),
    "SUBMIT": ("program", "auth", "subjects", "purpose"),
    "OPEN": ("record",),
    "EXTEND": ("from", "purpose"),
    "RESOLVE": ("master", "domain", "submit"),
    "LINK": ("master", "from", "to", "submit"),
    "ALIAS": ("master", "ttl"),
    "ATTACK": ("kind",),
}


@dataclass(frozen=True)
class Step:
    keyword: str
    handle: str | None
    args: tuple[tuple[str, str], ...]
    line: int = field(default=0, compare=False)

    def arg(self, key: str, default: str | None = None) -> str | None:
        for k, v in self.args:
            if k == key:
                return v
        return default

    def arg_map(self) -> dict[str, str]:
        return dict(self.args)

    def render(self) -> str:
        # shlex.quote quotes exactly when the value needs it ('=' stays bare)
        parts = [self.keyword]
        if self.handle is not None:
            parts.append(shlex.quote(self.handle))
        for k, v in self.args:
            parts.append(f"{k}={shlex.quote(v)}")
        return " ".join(parts)


@dataclass(frozen=True)
class Scenario:
    name: str
    seed: int
    steps: tuple[Step, ...]

    def serialize(self) -> str:
        lines = [f"NAME {self.name}", f"SEED {self.seed}"]
        lines.extend(step.render() for step in self.steps)
        return "".join(line + "\n" for line in lines)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_HANDLE_KEYWORDS = {
    # keyword -> (positional meaning, declares?)
    "DOMAIN": ("domain", True),
    "MASTER": ("master", True),
    "SILO": ("silo", True),
    "PURPOSE": ("purpose", True),
    "PROGRAM": ("program", True),
    "GRANT": ("grant", True),
    "EXTEND": ("grant", True),
    "REVOKE": ("grant", False),
    "CONSENT": ("master", False),
    "RENEW": ("master", False),
    "OPTOUT": ("master", False),
    "PUT": ("record", True),
    "SUBMIT": ("submit", True),
    "OPEN": ("submit", False),
    "ALIAS": ("alias", True),
    "ROUTE": ("alias", False),
}


def parse_scenario(text: str, default_name: str = "scenario") -> Scenario:
    name = default_name
    seed = 0
    steps: list[Step] = []
    declared: dict[str, set[str]] = {
        kind: set() for kind in
        ("domain", "master", "silo", "purpose", "program", "grant", "record", "submit", "alias")
    }

    def require_declared(kind: str, handle: str, line_no: int) -> None:
        if handle not in declared[kind]:
            raise ScenarioReferenceError(f"{kind} {handle!r} not declared", line_no)

    def declare(kind: str, handle: str, line_no: int) -> None:
        if handle in declared[kind]:
            raise ScenarioSyntaxError(f"{kind} {handle!r} already declared", line_no)
        declared[kind].add(handle)

    for line_no, raw in enumerate(text.splitlines(), start=1):
        try:
            tokens = shlex.split(raw, comments=True)
        except ValueError as exc:
            raise ScenarioSyntaxError(str(exc), line_no)
        if not tokens:
            continue
        keyword = tokens[0]
        if keyword == "NAME" or keyword == "SEED":
            if steps:
                raise ScenarioSyntaxError(f"{keyword} must precede all steps", line_no)
            if len(tokens) != 2:
                raise ScenarioSyntaxError(f"{keyword} takes exactly one value", line_no)
            if keyword == "NAME":
                name = tokens[1]
            else:
                try:
                    seed = int(tokens[1])
                except ValueError:
                    raise ScenarioSyntaxError("SEED must be an integer", line_no)
            continue
        if keyword not in _KEYWORDS:
            raise ScenarioSyntaxError(f"unknown keyword {keyword!r}", line_no)

        handle = None
        rest = tokens[1:]
        if keyword == "TICK":
            if len(rest) != 1:
                raise ScenarioSyntaxError("TICK takes exactly one count", line_no)
            try:
                int(rest[0])
            except ValueError:
                raise ScenarioSyntaxError("TICK count must be an integer", line_no)
            handle, rest = rest[0], []
        elif keyword in _HANDLE_KEYWORDS:
            if not rest or "=" in rest[0]:
                raise ScenarioSyntaxError(f"{keyword} needs a leading handle", line_no)
            handle, rest = rest[0], rest[1:]

        args = []
        seen_keys = set()
        for token in rest:
            key, eq, value = token.partition("=")
            if not eq or not key:
                raise ScenarioSyntaxError(f"expected key=value, got {token!r}", line_no)
            if key in seen_keys:
                raise ScenarioSyntaxError(f"duplicate argument {key!r}", line_no)
            seen_keys.add(key)
            args.append((key, value))
        step = Step(keyword=keyword, handle=handle, args=tuple(args), line=line_no)

        for required in _REQUIRED_ARGS.get(keyword, ()):
            if step.arg(required) is None:
                raise ScenarioSyntaxError(f"{keyword} requires {required}=", line_no)

        _validate_references(step, declared, require_declared, declare)
        steps.append(step)

    return Scenario(name=name, seed=seed, steps=tuple(steps))


def _validate_references(step: Step, declared, require_declared, declare) -> None:
    keyword, line_no = step.keyword, step.line
    if keyword in _HANDLE_KEYWORDS:
        kind, declares = _HANDLE_KEYWORDS[keyword]
        if declares:
            declare(kind, step.handle, line_no)
        else:
            require_declared(kind, step.handle, line_no)
    if keyword == "SILO":
        require_declared("domain", step.arg("domain"), line_no)
    elif keyword == "PROGRAM":
        require_declared("purpose", step.arg("purpose"), line_no)
        require_declared("domain", step.arg("domain"), line_no)
    elif keyword == "GRANT":
        require_declared("purpose", step.arg("purpose"), line_no)
        require_declared("domain", step.arg("domain"), line_no)
    elif keyword in ("CONSENT", "RENEW", "OPTOUT"):
        require_declared("purpose", step.arg("purpose"), line_no)
    elif keyword == "PUT":
        require_declared("silo", step.arg("silo"), line_no)
        require_declared("master", step.arg("master"), line_no)
    elif keyword == "SUBMIT":
        require_declared("program", step.arg("program"), line_no)
        require_declared("grant", step.arg("auth"), line_no)
        require_declared("purpose", step.arg("purpose"), line_no)
        for subject in step.arg("subjects").split(","):
            require_declared("master", subject, line_no)
        if step.arg("domain"):
            require_declared("domain", step.arg("domain"), line_no)
    elif keyword == "OPEN":
        require_declared("record", step.arg("record"), line_no)
    elif keyword == "EXTEND":
        require_declared("grant", step.arg("from"), line_no)
        require_declared("purpose", step.arg("purpose"), line_no)
    elif keyword == "RESOLVE":
        require_declared("master", step.arg("master"), line_no)
        require_declared("domain", step.arg("domain"), line_no)
        require_declared("submit", step.arg("submit"), line_no)
    elif keyword == "LINK":
        require_declared("master", step.arg("master"), line_no)
        require_declared("domain", step.arg("from"), line_no)
        require_declared("domain", step.arg("to"), line_no)
        require_declared("submit", step.arg("submit"), line_no)
    elif keyword == "ALIAS":
        require_declared("master", step.arg("master"), line_no)
    elif keyword == "ATTACK":
        kind = step.arg("kind")
        if kind not in ATTACK_KINDS:
            raise ScenarioSyntaxError(f"unknown attack kind {kind!r}", line_no)
        for key, ref_kind in (("submit", "submit"), ("program", "program"),
                              ("auth", "grant"), ("record", "record"), ("master", "master")):
            if step.arg(key):
                require_declared(ref_kind, step.arg(key), line_no)
        if step.arg("subjects"):
            for subject in step.arg("subjects").split(","):
                require_declared("master", subject, line_no)


def load_scenario(path: Path | str) -> Scenario:
    path = Path(path)
    return parse_scenario(path.read_text(), default_name=path.stem)


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

@dataclass
class StepOutcome:
    index: int
    keyword: str
    handle: str | None
    ok: bool
    detail: str


@dataclass
class AttackOutcome:
    kind: str
    caught: bool
    detail: str
    extra: dict[str, str] = field(default_factory=dict)


@dataclass
class InvariantResult:
    name: str
    ok: bool
    detail: str


@dataclass
class Report:
    scenario_name: str
    seed: int
    steps: list[StepOutcome]
    attacks: list[AttackOutcome]
    invariants: list[InvariantResult]

    @property
    def passed(self) -> bool:
        return all(inv.ok for inv in self.invariants)

    def render(self) -> str:
        lines = [f"scenario: {self.scenario_name}", f"seed: {self.seed}", "== steps =="]
        for s in self.steps:
            status = "ok    " if s.ok else "failed"
            handle = f" {s.handle}" if s.handle else ""
            detail = f" {s.detail}" if s.detail else ""
            lines.append(f"{s.index:03d} {status} {s.keyword}{handle}{detail}")
        lines.append("== attacks ==")
        for a in self.attacks:
            extra = "".join(f" {k}={v}" for k, v in sorted(a.extra.items()))
            lines.append(f"{a.kind} caught={'yes' if a.caught else 'NO'}{extra} detail={a.detail}")
        lines.append("== invariants ==")
        for inv in self.invariants:
            detail = f" {inv.detail}" if inv.detail else ""
            lines.append(f"{inv.name} {'ok' if inv.ok else 'FAIL'}{detail}")
        lines.append("== summary ==")
        lines.append(f"steps={len(self.steps)} attacks={len(self.attacks)} "
                     f"invariants={len(self.invariants)}")
        lines.append(f"result: {'pass' if self.passed else 'FAIL'}")
        return "".join(line + "\n" for line in lines)


# ---------------------------------------------------------------------------
# Sentinel scan
# ---------------------------------------------------------------------------

def scan_for_sentinels(state_dir: Path, sentinels: list[str],
                       exclude_top: tuple[str, ...] = ("vault",),
                       extra_blobs: list[bytes] | None = None) -> list[str]:
    """Search every persisted byte (raw and base64-decoded) for sentinel values.

    Directories named in ``exclude_top`` (the vault, which legitimately
    holds real attributes) are skipped. Values shorter than 6 bytes are not
    scannable (a one-digit field value matches every file by chance), so
    plant distinctive sentinels. Returns a list of hits.
    """
    sentinels = [s for s in sentinels if len(s) >= 6]
    needles = [s.encode("utf-8") for s in sentinels]
    hits: list[str] = []

    def scan_blob(blob: bytes, where: str) -> None:
        for sentinel, needle in zip(sentinels, needles):
            if needle and needle in blob:
                hits.append(f"{where}: {sentinel!r}")

    for path in sorted(state_dir.rglob("*")):
        if not path.is_file():
            continue
        rel = path.relative_to(state_dir)
        if rel.parts and rel.parts[0] in exclude_top:
            continue
        raw = path.read_bytes()
        scan_blob(raw, str(rel))
        for line in raw.splitlines():  # ledger/event lines are base64
            try:
                scan_blob(base64.b64decode(line, validate=True), f"{rel} (decoded)")
            except Exception:
                continue
    for i, blob in enumerate(extra_blobs or []):
        scan_blob(blob, f"wire[{i}]")
    return hits


# ---------------------------------------------------------------------------
# Adversary models
# ---------------------------------------------------------------------------

def _match_by_order(reference: list[str], other: list[str]) -> dict[str, str]:
    return {ref: oth for ref, oth in zip(reference, other)}

def _match_by_rank(reference: list[str], other: list[str]) -> dict[str, str]:
    return {ref: oth for ref, oth in zip(sorted(reference), sorted(other))}


def linkage_accuracy(visible: dict[str, list[str]], truth: dict[str, dict[str, str]]) -> float:
    """Best accuracy an order/rank-matching adversary achieves from silo state.

    ``visible`` maps domain -> vids in record-creation order (all the silo
    reveals); ``truth`` maps master -> {domain: vid}. A subject counts as
    linked only if matched correctly in every non-reference domain.
    """
    domains = sorted(visible)
    reference, others = domains[0], domains[1:]
    subjects = [m for m, vids in sorted(truth.items()) if all(d in vids for d in domains)]
    if not subjects:
        return 0.0
    best = 0.0
    for strategy in (_match_by_order, _match_by_rank):
        guesses = {d: strategy(visible[reference], visible[d]) for d in others}
        correct = 0
        for master in subjects:
            ref_vid = truth[master][reference]
            if all(guesses[d].get(ref_vid) == truth[master][d] for d in others):
                correct += 1
        best = max(best, correct / len(subjects))
    return best


def control_linkage_accuracy(secret: bytes, master_ids: list[str],
                             visible: dict[str, list[str]],
                             truth: dict[str, dict[str, str]]) -> float:
    """Accuracy of an adversary holding the vault secret and master list.

    Re-derives every vid exactly as the vault does (counter retries
    included), which reconstructs the full cross-domain mapping.
    """
    domains = sorted(visible)
    derived: dict[str, dict[str, str]] = {m: {} for m in master_ids}
    for domain in domains:
        seen: set[str] = set()
        for master in master_ids:
            counter = 0
            while True:
                vid = derive_vid_value(secret, master, domain, counter)
                if vid not in seen:
                    break
                counter += 1
            seen.add(vid)
            derived[master][domain] = vid
    subjects = [m for m, vids in sorted(truth.items()) if all(d in vids for d in domains)]
    if not subjects:
        return 0.0
    correct = sum(1 for m in subjects if all(derived[m][d] == truth[m][d] for d in domains))
    return correct / len(subjects)


def adversary_link_accuracy(report: Report) -> float:
    """Extract the cross-silo linkage accuracy from a run report."""
    for attack in report.attacks:
        if attack.kind == "CrossSiloLink":
            n = int(attack.extra.get("n", "0"))
            ndom = int(attack.extra.get("domains", "0"))
            if n == 1:
                return 1.0
            if n < 20 or ndom < 2:
                raise InsufficientPopulation(f"need >=20 subjects in >=2 domains, got n={n} domains={ndom}")
            return float(attack.extra["accuracy"])
    raise InsufficientPopulation("scenario ran no CrossSiloLink attack")


# ---------------------------------------------------------------------------
# Runner
# ---------------------------------------------------------------------------

class _Runner:
    def __init__(self, scenario: Scenario, seed: int):
        self.scenario = scenario
        self.seed = seed
        self.deployment = Deployment(seed=seed, clock_mode="logical")
        self.deployment.gate.wire_capture = []
        self.masters: dict[str, str] = {}
        self.silo_domains: dict[str, str] = {}
        self.programs: dict[str, bytes] = {}
        self.grants: dict[str, str] = {}
        self.records: dict[str, str] = {}
        self.submits: dict[str, tuple[AccessRequest, object]] = {}
        self.aliases: dict[str, str] = {}
        self.sentinels: list[str] = []
        self.submit_count = 0
        self.truncations: list[tuple[str, int]] = []
        self.outcomes: list[StepOutcome] = []
        self.attacks: list[AttackOutcome] = []

    # -- handle helpers -----------------------------------------------------------

    def vid_of(self, master_handle: str, domain: str) -> str:
        return self.deployment.vault.derive_vid(self.masters[master_handle], domain).vid

    def registry_vid(self, master_handle: str) -> str:
        return self.vid_of(master_handle, REGISTRY_DOMAIN)

    def _submit(self, request: AccessRequest):
        self.submit_count += 1
        return self.deployment.gate.submit(request)

    def build_request(self, request_id: str, program: str, auth_handle: str,
                      subject_handles: list[str], purpose: str, domain: str | None,
                      operation: str, classes: list[str],
                      digest: bytes | None = None) -> AccessRequest:
        dep = self.deployment
        auth_id = self.grants[auth_handle]
        auth = dep.registry.authorizations[auth_id]
        domain = domain or auth.scope.domain
        vids = [self.vid_of(h, domain) for h in subject_handles]
        return AccessRequest.build(
            controller=dep.controller,
            request_id=request_id,
            program_id=program,
            content_digest=digest if digest is not None else crypto.sha256(self.programs[program]),
            auth_id=auth_id,
            domain=domain,
            operation=operation,
            subject_vids=vids,
            requested_fields=classes,
            purpose_code=purpose,
            timestamp=dep.clock.now(),
            nonce=dep.rand_bytes(16),
        )

    # -- step execution ------------------------------------------------------------

    def run_step(self, index: int, step: Step) -> None:
        try:
            detail = self._dispatch(step) or ""
            ok = True
        except RegctlError as exc:
            detail = f"{type(exc).__name__}: {exc}"
            ok = False
        self.outcomes.append(StepOutcome(index, step.keyword, step.handle, ok, detail))

    def _dispatch(self, step: Step) -> str | None:
        dep = self.deployment
        kw = step.keyword
        if kw == "TICK":
            dep.clock.advance(int(step.handle))
            return f"tick={dep.clock.now()}"
        if kw == "DOMAIN":
            dep.vault.register_domain(step.handle)
            return None
        if kw == "MASTER":
            attributes = step.arg_map()
            self.sentinels.extend(attributes.values())
            self.masters[step.handle] = dep.vault.register_master(attributes)
            return f"master_id={self.masters[step.handle]}"
        if kw == "SILO":
            fields = []
            for pair in step.arg("fields").split(","):
                name, sep, cls = pair.partition(":")
                if not sep:
                    raise ScenarioSyntaxError(f"field spec needs name:class, got {pair!r}", step.line)
                fields.append((name, cls))
            schema = SiloSchema(domain=step.arg("domain"), field_classes=tuple(fields),
                                contact_approved=step.arg("contact", "no") == "yes")
            dep.create_silo(schema)
            self.silo_domains[step.handle] = schema.domain
            return f"domain={schema.domain}"
        if kw == "PURPOSE":
            dep.registry.register_purpose(step.handle, step.arg("desc", ""))
            return None
        if kw == "PROGRAM":
            artifact = step.arg("artifact", f"program:{step.handle}").encode("utf-8")
            scope = Scope(step.arg("domain"), tuple(_split(step.arg("classes"))), step.arg("op"))
            manifest = dep.registry.sign_program(step.handle, artifact, step.arg("purpose"), scope)
            self.programs[step.handle] = artifact
            return f"digest={manifest.content_digest.hex()[:16]}"
        if kw == "GRANT":
            grantee = step.arg("grantee")
            key_id = dep.controller.key_id if grantee == "controller" else grantee
            scope = Scope(step.arg("domain"), tuple(_split(step.arg("classes"))), step.arg("op"))
            auth = dep.registry.grant(key_id, scope, step.arg("purpose"),
                                      Basis(step.arg("basis")),
                                      int(step.arg("from")), int(step.arg("until")))
            self.grants[step.handle] = auth.auth_id
            return f"auth_id={auth.auth_id}"
        if kw == "REVOKE":
            dep.registry.revoke(self.grants[step.handle])
            return None
        if kw == "CONSENT":
            dep.registry.record_consent(self.registry_vid(step.handle), step.arg("purpose"))
            return None
        if kw == "RENEW":
            dep.registry.record_consent_renewal(self.registry_vid(step.handle), step.arg("purpose"))
            return None
        if kw == "OPTOUT":
            proofs = dep.process_opt_out(self.registry_vid(step.handle), step.arg("purpose"))
            return f"obligations={len(proofs)}"
        if kw == "PUT":
            domain = self.silo_domains[step.arg("silo")]
            vid = self.vid_of(step.arg("master"), domain)
            fields = {k: v for k, v in step.args if k not in ("silo", "master")}
            self.sentinels.extend(fields.values())
            record_id = dep.silos[domain].put_record(vid, fields)
            self.records[step.handle] = record_id
            return f"record_id={record_id}"
        if kw == "SUBMIT":
            request = self.build_request(
                request_id=step.handle,
                program=step.arg("program"),
                auth_handle=step.arg("auth"),
                subject_handles=step.arg("subjects").split(","),
                purpose=step.arg("purpose"),
                domain=step.arg("domain"),
                operation=step.arg("op", "read"),
                classes=_split(step.arg("classes", "")),
            )
            result = self._submit(request)
            self.submits[step.handle] = (request, result)
            shares = len(result.ticket.regulator_shares) if result.ticket else 0
            return f"{result.decision} shares={shares}"
        if kw == "OPEN":
            _, result = self.submits[step.handle]
            if result.ticket is None:
                return f"no ticket ({result.decision})"
            record_id = self.records[step.arg("record")]
            silo = dep.silos[result.ticket.granted_scope.domain]
            fields = dep.gate.open_record(result.ticket, record_id,
                                          silo.controller_share(record_id))
            return f"fields={'+'.join(sorted(fields)) or '-'}"
        if kw == "EXTEND":
            auth = dep.registry.extend_purpose(self.grants[step.arg("from")], step.arg("purpose"))
            self.grants[step.handle] = auth.auth_id
            return f"auth_id={auth.auth_id} status={auth.status.value}"
        if kw == "RESOLVE":
            _, result = self.submits[step.arg("submit")]
            if result.ticket is None:
                return f"no ticket ({result.decision})"
            domain = step.arg("domain")
            dep.vault.resolve(self.vid_of(step.arg("master"), domain), domain, result.ticket)
            return "resolved"
        if kw == "LINK":
            _, result = self.submits[step.arg("submit")]
            if result.ticket is None:
                return f"no ticket ({result.decision})"
            vid_a = self.vid_of(step.arg("master"), step.arg("from"))
            dep.vault.link(vid_a, step.arg("from"), step.arg("to"), result.ticket)
            return "linked"
        if kw == "ALIAS":
            grant = dep.vault.issue_alias(self.masters[step.arg("master")], int(step.arg("ttl")))
            self.aliases[step.handle] = grant.alias_number
            return f"alias={grant.alias_number}"
        if kw == "ROUTE":
            at = int(step.arg("at")) if step.arg("at") else dep.clock.now()
            dep.vault.route(self.aliases[step.handle], at)
            return "routed"
        if kw == "ATTACK":
            self._run_attack(step)
            return f"kind={step.arg('kind')}"
        raise ScenarioSyntaxError(f"unhandled keyword {kw}", step.line)

    # -- attacks ------------------------------------------------------------------

    def _run_attack(self, step: Step) -> None:
        kind = step.arg("kind")
        handler = {
            "ReplayRequest": self._attack_replay,
            "TamperProgram": self._attack_tamper_program,
            "TruncateLedger": self._attack_truncate,
            "ForgeTicket": self._attack_forge_ticket,
            "AccessAfterOptOut": self._attack_access_after_optout,
            "WeakIdSmuggle": self._attack_weak_id,
            "CrossSiloLink": self._attack_cross_silo,
        }[kind]
        handler(step)

    def _attack_replay(self, step: Step) -> None:
        request, _ = self.submits[step.arg("submit")]
        result = self._submit(request)
        caught = (not result.decision.allowed and result.decision.reason == DenyReason.REPLAY)
        self.attacks.append(AttackOutcome("ReplayRequest", caught, str(result.decision)))

    def _attack_tamper_program(self, step: Step) -> None:
        program = step.arg("program")
        tampered = bytearray(self.programs[program])
        tampered[0] ^= 0xFF
        digest = crypto.sha256(bytes(tampered))
        runtime_ok = self.deployment.gate.verify_program_runtime(program, digest)
        request = self.build_request(
            request_id=f"atk-tamper-{len(self.attacks)}",
            program=program,
            auth_handle=step.arg("auth"),
            subject_handles=step.arg("subjects").split(","),
            purpose=step.arg("purpose"),
            domain=step.arg("domain"),
            operation=step.arg("op", "read"),
            classes=_split(step.arg("classes", "")),
            digest=digest,
        )
        result = self._submit(request)
        caught = (not runtime_ok and not result.decision.allowed
                  and result.decision.reason == DenyReason.MANIFEST)
        self.attacks.append(AttackOutcome(
            "TamperProgram", caught, f"{result.decision} runtime={runtime_ok}"))

    def _attack_truncate(self, step: Step) -> None:
        side = step.arg("side", "controller")
        count = int(step.arg("count", "1"))
        # applied against a copy at verification time; the live pair stays honest
        self.truncations.append((side, count))

    def _attack_forge_ticket(self, step: Step) -> None:
        dep = self.deployment
        record_id = self.records[step.arg("record")]
        domain = next(d for d, s in dep.silos.items() if record_id in dict(s.list_records()))
        forged = AccessTicket(
            ticket_id="T-forged",
            request_id="atk-forge",
            granted_scope=Scope(domain, ("financial", "health", "demographic", "other"), "read"),
            regulator_shares={record_id: KeyShare(dep.rand_bytes(32), Holder.REGULATOR)},
            expires_at=dep.clock.now() + 10_000,
            signature=b"",
        )
        # a forger without the regulator key signs with its own
        forged.signature = crypto.sign(dep.controller, forged.signing_payload())
        silo = dep.silos[domain]
        try:
            dep.gate.open_record(forged, record_id, silo.controller_share(record_id))
            caught, detail = False, "forged ticket accepted"
        except TicketInvalid as exc:
            caught, detail = True, f"TicketInvalid: {exc}"
        except RegctlError as exc:
            caught, detail = True, f"{type(exc).__name__}: {exc}"
        self.attacks.append(AttackOutcome("ForgeTicket", caught, detail))

    def _attack_access_after_optout(self, step: Step) -> None:
        request = self.build_request(
            request_id=f"atk-optout-{len(self.attacks)}",
            program=step.arg("program"),
            auth_handle=step.arg("auth"),
            subject_handles=[step.arg("master")],
            purpose=step.arg("purpose"),
            domain=step.arg("domain"),
            operation=step.arg("op", "read"),
            classes=_split(step.arg("classes", "")),
        )
        result = self._submit(request)
        denied = (not result.decision.allowed and result.decision.reason == DenyReason.CONSENT)
        notified = any(
            n.request_id == result.event_id and n.outcome.value == "Denied"
            for n in self.deployment.notifier.all_notifications()
        )
        self.attacks.append(AttackOutcome(
            "AccessAfterOptOut", denied and notified,
            f"{result.decision} notified={notified}"))

    def _attack_weak_id(self, step: Step) -> None:
        dep = self.deployment
        domain = step.arg("domain", "smuggle")
        field_name = step.arg("field", "address")
        field_class = step.arg("class", "other")
        try:
            dep.vault.register_domain(domain)
            dep.create_silo(SiloSchema(domain=domain,
                                       field_classes=((field_name, field_class),)))
            caught, detail = False, f"schema with {field_name!r} accepted"
        except WeakIdentifierRejected as exc:
            caught, detail = True, f"WeakIdentifierRejected: {exc}"
        self.attacks.append(AttackOutcome("WeakIdSmuggle", caught, detail))

    def _attack_cross_silo(self, step: Step) -> None:
        dep = self.deployment
        domains = step.arg("domains").split(",")
        visible = {
            d: [vid for _, vid in dep.silos[d].list_records()]
            for d in domains if d in dep.silos
        }
        truth: dict[str, dict[str, str]] = {}
        for master_id in dep.vault.masters:
            vids = {}
            for d in domains:
                vid = dep.vault.vid_if_derived(master_id, d)
                if vid is not None:
                    vids[d] = vid
            if len(vids) == len(domains):
                truth[master_id] = vids
        n = len(truth)
        accuracy = linkage_accuracy(visible, truth) if n else 0.0
        control = control_linkage_accuracy(
            dep.vault._secret, sorted(truth), visible, truth) if n else 0.0
        threshold = float(step.arg("threshold", "0")) or max(0.15, 3.0 / n if n else 1.0)
        caught = (n >= 1) and accuracy <= threshold and control == 1.0
        self.attacks.append(AttackOutcome(
            "CrossSiloLink", caught, "order/rank matching over silo-visible state",
            extra={"n": str(n), "domains": str(len(domains)),
                   "accuracy": f"{accuracy:.4f}", "control": f"{control:.4f}",
                   "threshold": f"{threshold:.4f}"}))

    # -- invariants ------------------------------------------------------------------

    def check_invariants(self, state_dir: Path) -> list[InvariantResult]:
        dep = self.deployment
        results: list[InvariantResult] = []

        bad_reg = dep.event_log.regulator_ledger.verify_chain()
        bad_ctrl = dep.event_log.controller_ledger.verify_chain()
        results.append(InvariantResult(
            "ledger-chains", bad_reg is None and bad_ctrl is None,
            f"regulator={bad_reg} controller={bad_ctrl}" if (bad_reg is not None or bad_ctrl is not None) else ""))

        divergence = cross_verify(dep.event_log.regulator_ledger, dep.event_log.controller_ledger)
        results.append(InvariantResult("cross-verify", divergence is None,
                                       str(divergence) if divergence else ""))

        reg_count = dep.event_log.access_entry_count(dep.event_log.regulator_ledger)
        ctrl_count = dep.event_log.access_entry_count(dep.event_log.controller_ledger)
        expected = dep.event_log.expected_notification_pairs()
        actual = dep.notifier.pairs()
        bijection_ok = (self.submit_count == reg_count == ctrl_count) and expected == actual
        results.append(InvariantResult(
            "access-bijection", bijection_ok,
            f"submits={self.submit_count} regulator={reg_count} controller={ctrl_count} "
            f"pairs={len(actual)}"))

        hits = scan_for_sentinels(state_dir, self.sentinels,
                                  extra_blobs=dep.gate.wire_capture)
        results.append(InvariantResult("sentinel-scan", not hits,
                                       f"hits={len(hits)}" if hits else ""))

        custody_ok, custody_detail = self._probe_dual_custody()
        results.append(InvariantResult("dual-custody", custody_ok, custody_detail))

        releases = dep.gate.plaintext_releases
        consumed = dep.gate.consumed_count()
        results.append(InvariantResult("no-bypass", releases == consumed,
                                       f"releases={releases} consumed={consumed}"))

        optout_ok, optout_detail = self._probe_optout_enforcement()
        results.append(InvariantResult("optout-enforcement", optout_ok, optout_detail))

        results.append(InvariantResult(
            "registry-signatures", dep.registry.verify_stored_objects(), ""))

        for side, count in self.truncations:
            self._verify_truncation(side, count)
        results.append(InvariantResult(
            "attack-coverage", all(a.caught for a in self.attacks),
            f"attacks={len(self.attacks)}"))
        return results

    def _probe_dual_custody(self) -> tuple[bool, str]:
        dep = self.deployment
        probed = 0
        for domain in sorted(dep.silos):
            silo = dep.silos[domain]
            for record_id, vid in silo.list_records():
                controller_share = silo.controller_share(record_id)
                regulator_share = dep.share_store.get(record_id)
                if regulator_share is None:
                    return False, f"record {record_id} missing regulator share"
                ciphertext = silo.fetch_ciphertext(record_id)
                nonce = crypto.record_nonce(record_id)
                aad = record_aad(record_id, vid, domain)
                good = crypto.combine_shares(controller_share, regulator_share)
                try:
                    crypto.aead_decrypt(good, nonce, ciphertext, aad)
                except DecryptFailure:
                    return False, f"record {record_id} failed honest decrypt"
                substitutes = [
                    (controller_share, KeyShare(b"\x00" * 32, Holder.REGULATOR)),
                    (controller_share, KeyShare(dep.rand_bytes(32), Holder.REGULATOR)),
                    (KeyShare(b"\x00" * 32, Holder.CONTROLLER), regulator_share),
                    (KeyShare(dep.rand_bytes(32), Holder.CONTROLLER), regulator_share),
                ]
                for c, r in substitutes:
                    try:
                        crypto.aead_decrypt(crypto.combine_shares(c, r), nonce, ciphertext, aad)
                        return False, f"record {record_id} decrypted with one share"
                    except DecryptFailure:
                        pass
                probed += 1
        return True, f"records={probed}"

    def _probe_optout_enforcement(self) -> tuple[bool, str]:
        """No opted-out (subject, purpose) pair may pass a consent-basis check."""
        registry = self.deployment.registry
        now = self.deployment.clock.now()
        probed = 0
        for (subject, purpose), records in sorted(registry.consents.items()):
            if not records or records[-1].live():
                continue
            probed += 1
            if registry.has_live_consent(subject, purpose):
                return False, f"opted-out pair ({subject}, {purpose}) still consents"
            for auth in registry.authorizations.values():
                if auth.purpose_code != purpose or auth.basis.value != "Consent":
                    continue
                for manifest in registry.manifests.values():
                    decision = registry.check(auth.auth_id, manifest.content_digest,
                                              auth.scope, purpose, subject, now)
                    if decision.allowed:
                        return False, f"check allowed opted-out pair via {auth.auth_id}"
        return True, f"pairs={probed}"

    def _verify_truncation(self, side: str, count: int) -> None:
        dep = self.deployment
        victim = (dep.event_log.controller_ledger if side == "controller"
                  else dep.event_log.regulator_ledger)
        other = (dep.event_log.regulator_ledger if side == "controller"
                 else dep.event_log.controller_ledger)
        tampered = Ledger(owner=victim.owner, counterpart=victim.counterpart)
        tampered.load_entries(victim.entries[: max(0, len(victim.entries) - count)])
        divergence = (cross_verify(tampered, other) if side == "controller"
                      else cross_verify(other, tampered))
        self.attacks.append(AttackOutcome(
            "TruncateLedger", divergence is not None,
            str(divergence) if divergence else "truncation not detected",
            extra={"side": side, "count": str(count)}))


def _split(value: str | None) -> list[str]:
    if not value:
        return []
    return [v for v in value.split(",") if v]


def run(scenario: Scenario, seed: int | None = None,
        state_dir: Path | None = None) -> Report:
    """Execute a scenario against fresh services and check every invariant."""
    if state_dir is not None and (Path(state_dir) / "keys" / "regulator.seed").exists():
        raise RegctlError(f"state dir {state_dir} already holds a deployment; "
                          "scenarios run against fresh services")
    effective_seed = scenario.seed if seed is None else seed
    runner = _Runner(scenario, effective_seed)
    for index, step in enumerate(scenario.steps, start=1):
        runner.deployment.clock.advance(1)
        runner.run_step(index, step)

    if state_dir is not None:
        runner.deployment.state_dir = Path(state_dir)
        runner.deployment.save()
        invariants = runner.check_invariants(Path(state_dir))
    else:
        with tempfile.TemporaryDirectory(prefix="regctl-run-") as tmp:
            runner.deployment.state_dir = Path(tmp)
            runner.deployment.save()
            invariants = runner.check_invariants(Path(tmp))

    return Report(
        scenario_name=scenario.name,
        seed=effective_seed,
        steps=runner.outcomes,
        attacks=runner.attacks,
        invariants=invariants,
    )
