"""Run configuration (INI files plus flag overrides) and output manifests."""
from __future__ import annotations

import configparser
import hashlib
import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

MANIFEST_SCHEMA_VERSION = 1
OUTPUT_ENV = "MJSQ_OUTPUT_DIR"


class ConfigError(ValueError):
    """Malformed configuration: unknown key, bad type, missing value."""


# section -> key -> type; every accepted key is listed here
SCHEMA: dict[str, dict[str, type]] = {
    "system": {"n": int, "a": float, "b": float, "policy": str, "seed": int, "horizon": float, "d": int},
    "recorder": {"batches": int, "hist_k": int, "hist_bins": int, "snapshot_k": int, "track_labels": bool,
                 "audit_every": int},
    "run": {"replications": int, "start": str, "workers": int},
    "atlas": {"N": int, "dt": float, "T": float, "replications": int, "k": int, "threshold": float,
              "negative_control": bool, "dual_dts": str, "dual_paths": int, "dual_N": int, "dual_T": float},
    "compare": {"policies": str, "k": int},
    "exact": {"moments": bool, "k": int, "jackson": str, "limit": str},
    "output": {"figures": bool, "ndjson": bool},
}


def _convert(section: str, key: str, raw):
    typ = SCHEMA[section][key]
    if raw is None or isinstance(raw, typ) and not (typ is int and isinstance(raw, bool)):
        return raw
    try:
        if typ is bool:
            s = str(raw).strip().lower()
            if s in ("1", "true", "yes", "on"):
                return True
            if s in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(str(raw).strip())
        if typ is float:
            return float(str(raw).strip())
        return str(raw).strip()
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected {typ.__name__}, got {raw!r}") from None


@dataclass
class RunConfig:
    """Resolved configuration as nested ``section -> key -> value``."""

    values: dict[str, dict] = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: dict | None = None) -> "RunConfig":
        values: dict[str, dict] = {}
        if path is not None:
            parser = configparser.ConfigParser(interpolation=None)
            parser.optionxform = str  # keep key case (N vs n)
            try:
                with open(path) as fh:
                    parser.read_file(fh)
            except (OSError, configparser.Error) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
            for section in parser.sections():
                if section not in SCHEMA:
                    raise ConfigError(f"unknown section [{section}]")
                for key, raw in parser.items(section):
                    if key not in SCHEMA[section]:
                        raise ConfigError(f"unknown key [{section}] {key}")
                    values.setdefault(section, {})[key] = _convert(section, key, raw)
        for (section, key), raw in (overrides or {}).items():
            if raw is None:
                continue
            if section not in SCHEMA or key not in SCHEMA[section]:
                raise ConfigError(f"unknown key [{section}] {key}")
            values.setdefault(section, {})[key] = _convert(section, key, raw)
        return cls(values)

    def get(self, section: str, key: str, default=None):
        return self.values.get(section, {}).get(key, default)

    def require(self, section: str, key: str):
        v = self.get(section, key)
        if v is None:
            raise ConfigError(f"missing required value [{section}] {key}")
        return v

    def canonical(self) -> str:
        """Order- and whitespace-insensitive serialization."""
        clean = {s: {k: v for k, v in kv.items() if v is not None} for s, kv in self.values.items()}
        clean = {s: kv for s, kv in clean.items() if kv}
        return json.dumps(clean, sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def default_output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "mjsq-output"))


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, config: RunConfig, artifacts: list[Path], version: str) -> Path:
    """Write manifest.json listing every artifact with its sha256 digest."""
    entries = [{"path": p.name, "sha256": file_digest(p)} for p in sorted(artifacts)]
    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "experiment_id": f"{command}-{config.digest()[:12]}",
        "command": command,
        "config": json.loads(config.canonical()),
        "config_hash": config.digest(),
        "toolkit_version": version,
        "seed": config.get("system", "seed", 0),
        "created_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "artifacts": entries,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def verify_manifest(path: str | Path) -> list[str]:
    """Return a list of problems (empty when every digest and the config hash check out)."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        return [f"cannot read manifest: {exc}"]
    problems = []
    canon = json.dumps(manifest.get("config", {}), sort_keys=True, separators=(",", ":"))
    if hashlib.sha256(canon.encode()).hexdigest() != manifest.get("config_hash"):
        problems.append("config hash does not match stored config")
    for entry in manifest.get("artifacts", []):
        p = path.parent / entry["path"]
        if not p.exists():
            problems.append(f"missing artifact {entry['path']}")
        elif file_digest(p) != entry["sha256"]:
            problems.append(f"digest mismatch for {entry['path']}")
    return problems
