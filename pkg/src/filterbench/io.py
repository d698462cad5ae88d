"""File formats: CSV series, JSON model files and YAML configs."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import subprocess
import zlib
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml

from . import __version__
from .errors import DataError, InvalidSpecError
from .hmm_discrete import DiscreteHMM
from .markov_core import MarkovSpec, SdePath


def ingest_csv(path, schema: Sequence[str]) -> dict[str, np.ndarray]:
    """Read the named numeric columns; blanks, NaN and text are errors naming the line."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        header = [name.strip() for name in header]
        missing = [name for name in schema if name not in header]
        if missing:
            raise DataError(f"{path} line 1: missing column(s) {', '.join(missing)}")
        cols = [header.index(name) for name in schema]
        data: list[list[float]] = [[] for _ in schema]
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            for out, name, c in zip(data, schema, cols):
                cell = row[c].strip() if c < len(row) else ""
                try:
                    value = float(cell)
                except ValueError:
                    raise DataError(f"{path} line {lineno}: column {name!r} has non-numeric cell {cell!r}") from None
                if math.isnan(value):
                    raise DataError(f"{path} line {lineno}: column {name!r} is NaN")
                out.append(value)
    return {name: np.array(values) for name, values in zip(schema, data)}


def ingest_path(path) -> SdePath:
    """Two-column ``t,value`` file as a sampled path."""
    cols = ingest_csv(path, ("t", "value"))
    return SdePath(cols["t"], cols["value"])


def ingest_column(path, name: str) -> np.ndarray:
    return ingest_csv(path, (name,))[name]


def _cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def emit_results(series: Mapping[str, Sequence], path) -> Path:
    """CSV with columns in sorted order and floats written round-trip exact."""
    path = Path(path)
    names = sorted(series)
    columns = [list(series[name]) for name in names]
    lengths = {len(c) for c in columns}
    if len(lengths) > 1:
        raise DataError("all columns must have the same length")
    rows = lengths.pop() if lengths else 0
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        for i in range(rows):
            writer.writerow([_cell(c[i]) for c in columns])
    return path


def _jsonable(obj):
    if isinstance(obj, Mapping):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        return value if math.isfinite(value) else str(value)
    return obj


def dump_json(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n"


def emit_json(obj, path) -> Path:
    path = Path(path)
    path.write_text(dump_json(obj))
    return path


def load_config(path) -> dict:
    """YAML (or JSON) mapping."""
    try:
        cfg = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise DataError(f"{path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise InvalidSpecError(f"{path}: config must be a mapping")
    return cfg


def load_json(path) -> dict:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path} line {exc.lineno}: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise InvalidSpecError(f"{path}: expected a JSON object")
    return obj


def hmm_from_dict(obj: Mapping) -> DiscreteHMM:
    """``{states, transition, h, gamma, p0}`` with transition rows row-major."""
    try:
        chain = MarkovSpec.one_step(obj["states"], obj["transition"])
        d = chain.d
        p0 = obj.get("p0", [1.0 / d] * d)
        return DiscreteHMM(chain, np.asarray(obj["h"], dtype=float), float(obj["gamma"]), np.asarray(p0, dtype=float))
    except KeyError as exc:
        raise InvalidSpecError(f"HMM spec is missing {exc.args[0]!r}") from None


def hmm_to_dict(hmm: DiscreteHMM) -> dict:
    return {
        "states": hmm.chain.states.tolist(),
        "transition": hmm.transition.tolist(),
        "h": hmm.h.tolist(),
        "gamma": hmm.gamma,
        "p0": hmm.p0.tolist(),
    }


def load_hmm(path) -> DiscreteHMM:
    return hmm_from_dict(load_json(path))


def config_hash(cfg: Mapping) -> str:
    canonical = json.dumps(_jsonable(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def substream_seed(seed: int, name: str) -> int:
    """Independent 64-bit seed for the named purpose."""
    ss = np.random.SeedSequence([int(seed) & ((1 << 64) - 1), zlib.crc32(name.encode())])
    return int(ss.generate_state(1, np.uint64)[0])


def describe_version() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return f"v{__version__}"
    tag = out.stdout.strip()
    return f"v{__version__}-g{tag}" if out.returncode == 0 and tag else f"v{__version__}"
