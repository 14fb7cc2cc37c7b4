"""Checkpoints, delimiter-separated tables, flat config files and run manifests."""
from __future__ import annotations

import hashlib
import json
import platform
import sys
from dataclasses import asdict, fields, is_dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from hopgraph.errors import ConfigError, ValidationError
from hopgraph.numerics.tensor import Parameter

CHECKPOINT_META = "__meta__"


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: Path, params: Mapping[str, Parameter], meta: Optional[dict] = None) -> Path:
    """Write parameters (and a JSON metadata blob) to an uncompressed ``.npz``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {name: np.asarray(p.data) for name, p in params.items()}
    if CHECKPOINT_META in arrays:
        raise ValidationError(f"parameter name {CHECKPOINT_META!r} is reserved")
    arrays[CHECKPOINT_META] = np.array(json.dumps(meta or {}, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path: Path) -> tuple:
    """``(params, meta)`` with fresh :class:`Parameter` objects."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z[CHECKPOINT_META])) if CHECKPOINT_META in z.files else {}
        params = {k: Parameter(z[k], k) for k in z.files if k != CHECKPOINT_META}
    return params, meta


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_tsv(path: Path, columns: Sequence[str], rows: Iterable[Mapping]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["\t".join(columns)]
    for row in rows:
        lines.append("\t".join(format_value(row[c]) for c in columns))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_tsv(path: Path) -> list:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text:
        return []
    head = text[0].split("\t")
    return [dict(zip(head, line.split("\t"))) for line in text[1:] if line]


# ---------------------------------------------------------------------------
# flat key=value config
# ---------------------------------------------------------------------------


def read_config(path: Path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment. Values stay strings."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key.replace("-", "_")] = value
    return out


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def _jsonable(v):
    if is_dataclass(v):
        return {f.name: _jsonable(getattr(v, f.name)) for f in fields(v)}
    if isinstance(v, Mapping):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, set, frozenset)):
        items = [_jsonable(x) for x in v]
        return sorted(items, key=str) if isinstance(v, (set, frozenset)) else items
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, np.generic):
        return v.item()
    if hasattr(v, "value") and hasattr(v, "name"):  # enums
        return v.name
    return v


def versions() -> dict:
    import numba

    from hopgraph import __version__, _accel

    return {
        "hopgraph": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "numba": numba.__version__,
        "backend": _accel.backend(),
    }


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, argv: Sequence[str], config: dict, seed: int,
                   wall_seconds: float, outputs: Sequence[Path], status: str = "ok") -> Path:
    out_dir = Path(out_dir)
    entries = []
    for p in sorted(set(Path(o) for o in outputs)):
        if p.is_file():
            entries.append({"path": str(p.relative_to(out_dir)) if p.is_relative_to(out_dir) else str(p), "sha256": sha256(p)})
    doc = {
        "command": command,
        "argv": list(argv),
        "seed": seed,
        "config": _jsonable(config),
        "versions": versions(),
        "platform": f"{sys.platform}-{platform.machine()}",
        "wall_seconds": round(wall_seconds, 3),
        "status": status,
        "outputs": entries,
    }
    path = out_dir / "manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def dataclass_dict(obj) -> dict:
    return _jsonable(asdict(obj)) if is_dataclass(obj) else dict(obj)
