"""Run directories, config files and the manifest written next to every output."""

from __future__ import annotations

import contextlib
import hashlib
import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from . import __version__
from .errors import ConfigError, MinigenError, PreconditionError

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"


class RunExistsError(MinigenError, FileExistsError):
    code = "run_exists"


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def load_config(path: str | Path | None, defaults: Mapping[str, Any], open_sections: frozenset = frozenset()) -> dict:
    """Read a versioned JSON config and overlay it on ``defaults``.

    Unknown keys and a wrong schema version are errors. Nested dicts merge
    one level deep so a file can override a single field of a section.
    Sections named in ``open_sections`` take any key; their consumer checks them.
    """
    cfg = json.loads(json.dumps(defaults))
    if path is None:
        cfg["schema_version"] = SCHEMA_VERSION
        return cfg
    p = Path(path)
    if not p.exists() or p.is_dir():
        raise PreconditionError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON ({e.msg} at line {e.lineno})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: top level must be an object")
    version = raw.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{p}: schema_version must be {SCHEMA_VERSION}, got {version!r}")
    for key, value in raw.items():
        if key not in cfg:
            raise ConfigError(f"{p}: unknown key {key!r}")
        if isinstance(cfg[key], dict) and cfg[key] and isinstance(value, dict):
            extra = set(value) - set(cfg[key])
            if extra and key not in open_sections:
                raise ConfigError(f"{p}: unknown key {key}.{sorted(extra)[0]}")
            cfg[key].update(value)
        else:
            cfg[key] = value
    cfg["schema_version"] = SCHEMA_VERSION
    return cfg


def check_run_dir(out: str | Path, force: bool = False) -> None:
    out = Path(out)
    if out.exists() and (not out.is_dir() or any(out.iterdir())) and not force:
        raise RunExistsError(f"{out} already exists; pass --force to overwrite")


def prepare_run_dir(out: str | Path, force: bool = False) -> Path:
    out = Path(out)
    check_run_dir(out, force)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        if out.is_dir():
            shutil.rmtree(out)
        else:
            out.unlink()
    out.mkdir(parents=True, exist_ok=True)
    return out


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    seeds: dict[str, int] = field(default_factory=dict)
    deterministic: bool = True
    version: str = __version__

    def add_input(self, label: str, path: str | Path) -> str:
        digest = sha256_file(path)
        self.inputs[label] = digest
        self.config.setdefault("paths", {})[label] = str(path)
        return digest

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "command": self.command,
            "version": self.version,
            "deterministic": self.deterministic,
            "seeds": dict(self.seeds),
            "config": self.config,
            "inputs": dict(self.inputs),
            "outputs": dict(self.outputs),
        }

    def digest(self) -> str:
        """Hash of everything except the outputs, i.e. of what determines them."""
        d = self.to_dict()
        d.pop("outputs")
        return sha256_bytes(canonical_json(d).encode())

    def finalize(self, run_dir: str | Path) -> Path:
        run_dir = Path(run_dir)
        for p in sorted(run_dir.rglob("*")):
            if p.is_file() and p.name != MANIFEST_NAME:
                self.outputs[p.relative_to(run_dir).as_posix()] = sha256_file(p)
        path = run_dir / MANIFEST_NAME
        path.write_text(canonical_json(self.to_dict()), encoding="utf-8")
        return path


def read_manifest(run_dir: str | Path) -> dict:
    path = Path(run_dir) / MANIFEST_NAME
    if not path.is_file():
        raise PreconditionError(f"no manifest in {run_dir}")
    return json.loads(path.read_text(encoding="utf-8"))


def verify_manifest(run_dir: str | Path) -> list[str]:
    """Names of recorded files (inputs and outputs) whose current hash differs."""
    run_dir = Path(run_dir)
    m = read_manifest(run_dir)
    bad = []
    for rel, digest in m["outputs"].items():
        p = run_dir / rel
        if not p.is_file() or sha256_file(p) != digest:
            bad.append(rel)
    for label, digest in m["inputs"].items():
        p = Path(m["config"].get("paths", {}).get(label, ""))
        if not p.is_file() or sha256_file(p) != digest:
            bad.append(label)
    return bad


@contextlib.contextmanager
def numerics_mode(deterministic: bool = True):
    """Single-threaded BLAS in determinism mode; library defaults otherwise."""
    if not deterministic:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield
