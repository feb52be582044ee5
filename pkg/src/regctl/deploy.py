"""Desk-scale deployment: every service wired together in one process.

A Deployment owns the regulator and controller keys, the vault, the
registry, the gate, the paired ledgers, the notifier and all silos, and
knows how to persist the lot under a state directory (and reload it), so
the CLI can operate statefully across invocations and the scenario runner
can snapshot a run for byte-level inspection.

It also hosts the one cross-service workflow: opt-out deletion, which
walks every silo holding the subject's data, issues one regulator-signed
obligation per silo, erases records and shares on both sides, and attaches
the dual-signed proofs to the consent record.
"""

from __future__ import annotations

import json
import random
import secrets
from pathlib import Path

from .clock import Clock
from .crypto import Role, SigningIdentity
from .errors import RegctlError
from .events import EventLog
from .gate import Gate
from .notify import Notifier
from .registry import DeletionProof, Registry, Scope
from .silo import RegulatorShareStore, Silo, SiloSchema
from .vault import Vault

REGISTRY_DOMAIN = "registry"


class Deployment:
    def __init__(self, seed: int | None = None, clock_mode: str = "logical",
                 state_dir: Path | None = None):
        self.state_dir = Path(state_dir) if state_dir else None
        if seed is not None and self.state_dir is not None:
            # stateful CLI use: each invocation must continue, not restart,
            # the deterministic byte stream
            seed = seed * 1_000_003 + self._bump_invocation_counter()
        self._rng = random.Random(seed) if seed is not None else None
        self.clock = Clock(mode=clock_mode)

        reg_seed, ctrl_seed, vault_secret = self._load_or_create_keys()
        self.regulator = SigningIdentity.generate("regulator-1", Role.REGULATOR, reg_seed)
        self.controller = SigningIdentity.generate("controller-1", Role.CONTROLLER, ctrl_seed)

        self.notifier = Notifier()
        self.event_log = EventLog(self.regulator, self.controller, self.notifier, self.clock)
        self.registry = Registry(self.regulator, self.clock, self.event_log,
                                 subjects_in_scope=self._subjects_in_scope)
        self.share_store = RegulatorShareStore()
        self.vault = Vault(vault_secret, self.clock, self.event_log,
                           regulator=self.regulator, rand_bytes=self.rand_bytes)
        self.vault.register_domain(REGISTRY_DOMAIN)
        self.silos: dict[str, Silo] = {}
        self.gate = Gate(self.regulator, self.controller, self.registry, self.share_store,
                         self.silos, self.event_log, self.clock,
                         registry_vid_of=self._registry_vid_of, rand_bytes=self.rand_bytes)
        if self.state_dir is not None:
            self._load_state()

    # -- randomness and keys ------------------------------------------------------

    def _bump_invocation_counter(self) -> int:
        path = self.state_dir / "invocations.txt"
        count = int(path.read_text()) + 1 if path.exists() else 1
        self.state_dir.mkdir(parents=True, exist_ok=True)
        path.write_text(str(count))
        return count

    def rand_bytes(self, n: int) -> bytes:
        if self._rng is not None:
            return self._rng.randbytes(n)
        return secrets.token_bytes(n)

    def _load_or_create_keys(self) -> tuple[bytes, bytes, bytes]:
        if self.state_dir is not None:
            keys_dir = self.state_dir / "keys"
            if (keys_dir / "regulator.seed").exists():
                self._key_seeds = (
                    bytes.fromhex((keys_dir / "regulator.seed").read_text().strip()),
                    bytes.fromhex((keys_dir / "controller.seed").read_text().strip()),
                    bytes.fromhex((keys_dir / "vault.secret").read_text().strip()),
                )
                return self._key_seeds
        seeds = (self.rand_bytes(32), self.rand_bytes(32), self.rand_bytes(32))
        self._key_seeds = seeds
        if self.state_dir is not None:
            self._write_keys()
        return seeds

    def _write_keys(self) -> None:
        keys_dir = self.state_dir / "keys"
        keys_dir.mkdir(parents=True, exist_ok=True)
        if not (keys_dir / "regulator.seed").exists():
            (keys_dir / "regulator.seed").write_text(self._key_seeds[0].hex() + "\n")
            (keys_dir / "controller.seed").write_text(self._key_seeds[1].hex() + "\n")
            (keys_dir / "vault.secret").write_text(self._key_seeds[2].hex() + "\n")

    # -- wiring callbacks -----------------------------------------------------------

    def _registry_vid_of(self, domain: str, vid: str) -> str | None:
        return self.vault.registry_vid_of(domain, vid, REGISTRY_DOMAIN)

    def _subjects_in_scope(self, scope: Scope) -> list[str]:
        silo = self.silos.get(scope.domain)
        if silo is None:
            return []
        return sorted({vid for _, vid in silo.list_records()})

    # -- silo management ---------------------------------------------------------------

    def create_silo(self, schema: SiloSchema) -> Silo:
        if schema.domain in self.silos:
            raise RegctlError(f"silo for domain {schema.domain} already exists")
        self.vault.register_domain(schema.domain)
        silo = Silo(schema, self.share_store, vid_exists=self.vault.vid_exists,
                    clock=self.clock, event_log=self.event_log, rand_bytes=self.rand_bytes)
        self.silos[schema.domain] = silo
        return silo

    # -- opt-out deletion workflow --------------------------------------------------------

    def process_opt_out(self, subject_registry_vid: str, purpose_code: str) -> list[DeletionProof]:
        """Withdraw consent and erase the subject's data everywhere.

        One obligation per silo actually holding records; each yields a
        dual-signed proof attached to the consent record. The mapping from
        registry vid to per-domain vids happens inside the vault under the
        authority of the signed opt-out journal entry.
        """
        self.registry.opt_out(subject_registry_vid, purpose_code)
        master_id = self.vault.master_for_vid(REGISTRY_DOMAIN, subject_registry_vid)
        proofs: list[DeletionProof] = []
        if master_id is None:
            return proofs
        deleted_records: set[str] = set()
        for domain in sorted(self.silos):
            silo = self.silos[domain]
            vid = self.vault.vid_if_derived(master_id, domain)
            if vid is None:
                continue
            doomed = silo.records_for_vid(vid)
            if not doomed:
                continue
            obligation = self.registry.issue_deletion_obligation(
                subject_registry_vid, purpose_code, domain)
            proof = silo.process_deletion(obligation, vid, self.regulator, self.controller)
            self.registry.attach_deletion_proof(subject_registry_vid, purpose_code, proof)
            proofs.append(proof)
            deleted_records.update(doomed)
        if deleted_records:
            self.gate.drop_records_from_tickets(deleted_records)
        return proofs

    # -- persistence -------------------------------------------------------------------------

    def save(self) -> None:
        if self.state_dir is None:
            raise RegctlError("deployment has no state directory")
        root = self.state_dir
        root.mkdir(parents=True, exist_ok=True)
        self._write_keys()
        self.vault.save(root / "vault")
        self.registry.save(root / "registry.journal")
        self.event_log.save(root / "ledgers")
        self.share_store.save(root / "regulator_shares.json")
        (root / "gate.json").write_text(json.dumps(self.gate.state_dict(), indent=1, sort_keys=True))
        self.notifier.save(root / "notifications.jsonl")
        for domain in sorted(self.silos):
            self.silos[domain].save(root / "silos" / domain)
        clock_state = {"mode": self.clock.mode, "tick": self.clock.now() if self.clock.mode == "logical" else 0}
        (root / "clock.json").write_text(json.dumps(clock_state, sort_keys=True))

    def _load_state(self) -> None:
        root = self.state_dir
        clock_path = root / "clock.json"
        if clock_path.exists():
            state = json.loads(clock_path.read_text())
            if self.clock.mode == "logical" and state["mode"] == "logical":
                self.clock.set_tick(state["tick"])
        self.vault.load_state(root / "vault")
        self.registry.load(root / "registry.journal")
        self.event_log.load(root / "ledgers")
        self.share_store.load(root / "regulator_shares.json")
        gate_path = root / "gate.json"
        if gate_path.exists():
            self.gate.load_state(json.loads(gate_path.read_text()))
        notif_path = root / "notifications.jsonl"
        if notif_path.exists():
            self.notifier = Notifier.load(notif_path)
            self.event_log.notifier = self.notifier
        silos_root = root / "silos"
        if silos_root.exists():
            for silo_dir in sorted(p for p in silos_root.iterdir() if p.is_dir()):
                schema = Silo.load_schema(silo_dir)
                silo = Silo(schema, self.share_store, vid_exists=self.vault.vid_exists,
                            clock=self.clock, event_log=self.event_log,
                            rand_bytes=self.rand_bytes)
                silo.load_records(silo_dir)
                self.silos[schema.domain] = silo
