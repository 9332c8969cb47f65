"""Run manifests: the audit trail every CLI run leaves behind.

A manifest records what a run was asked to do (config snapshot), how its
randomness was derived (master seed plus the fan-out rule), what it read
(content hashes of input files), how long each phase took, which artifacts
it produced, and any warnings raised along the way.  ``write`` refuses to
finish if a named artifact is missing, so a manifest on disk is a promise
that its files exist.
"""

import datetime
import hashlib
import json
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .errors import StateError

__all__ = ["RunManifest", "SEED_RULE", "content_hash"]

# Recorded verbatim in every manifest so a reader can re-derive phase seeds.
SEED_RULE = (
    "phase seeds are numpy SeedSequence(master).spawn(1)[0]"
    ".generate_state(1, uint32)[0], spawned in phase registration order"
)


def content_hash(data: bytes) -> str:
    """Hex digest identifying input content; stable for identical bytes."""
    return hashlib.sha256(data).hexdigest()


class RunManifest:
    """Mutable record of one run, serialized to ``<out_dir>/manifest.json``."""

    def __init__(self, out_dir, config: dict, master_seed: int):
        self.out_dir = Path(out_dir)
        self.config = json.loads(json.dumps(config))  # defensive snapshot
        self.master_seed = int(master_seed)
        self.phase_seeds: dict[str, int] = {}
        self.input_hashes: dict[str, str] = {}
        self.phase_seconds: dict[str, float] = {}
        self.artifacts: list[str] = []
        self.warnings: list[str] = []
        self.extra: dict = {}
        self._seq = np.random.SeedSequence(self.master_seed)

    def derive_seed(self, phase: str) -> int:
        """Next phase seed under SEED_RULE, recorded under ``phase``."""
        if phase in self.phase_seeds:
            raise StateError(f"phase {phase!r} already has a seed")
        child = self._seq.spawn(1)[0]
        value = int(child.generate_state(1, np.uint32)[0])
        self.phase_seeds[phase] = value
        return value

    def add_input(self, name: str, path) -> str:
        digest = content_hash(Path(path).read_bytes())
        self.input_hashes[name] = digest
        return digest

    @contextmanager
    def phase(self, name: str):
        """Times the enclosed block; seconds land in ``phase_seconds``."""
        start = time.perf_counter()
        try:
            yield
        finally:
            self.phase_seconds[name] = time.perf_counter() - start

    def add_artifact(self, relpath: str) -> Path:
        """Registers an output file (relative to the run directory)."""
        if relpath not in self.artifacts:
            self.artifacts.append(relpath)
        return self.out_dir / relpath

    def warn(self, message: str) -> None:
        self.warnings.append(message)

    def write(self) -> Path:
        """Writes manifest.json after checking every named artifact exists."""
        for rel in self.artifacts:
            if not (self.out_dir / rel).exists():
                raise StateError(f"manifest names missing artifact {rel!r}")
        payload = {
            "config": self.config,
            "seeds": {
                "master": self.master_seed,
                "rule": SEED_RULE,
                "phases": self.phase_seeds,
            },
            "input_hashes": self.input_hashes,
            "phase_seconds": self.phase_seconds,
            "artifacts": self.artifacts,
            "warnings": self.warnings,
            "extra": self.extra,
            "written_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        }
        path = self.out_dir / "manifest.json"
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return path
