"""Utility functions shared across protomtl."""

import csv
import hashlib
import os
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Sequence, Union

import torch

from .exceptions import ConfigError

PathLike = Union[str, Path]


def read_kv(path: PathLike) -> Dict[str, str]:
    """Read a line-oriented ``key = value`` text file.

    Blank lines and lines starting with ``#`` are ignored. Keys keep file order.

    Parameters
    ----------
    path : str or Path
        File to read

    Returns
    -------
    dict[str, str]
        Raw string values keyed by name

    Raises
    ------
    ConfigError
        If a line has no ``=`` or a key repeats
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(str(path), f"cannot read file: {e}") from e

    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(str(path), f"line {lineno}: expected 'key = value'")
        if key in values:
            raise ConfigError(str(path), f"line {lineno}: duplicate key '{key}'")
        values[key] = value.strip()
    return values


def write_kv(path: PathLike, values: Mapping[str, Any]) -> None:
    """Write a mapping as ``key = value`` lines."""
    lines = [f"{key} = {_format_value(value)}" for key, value in values.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return " ".join(_format_value(v) for v in value)
    return str(value)


def write_csv(
    path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]
) -> Path:
    """Write rows to a CSV file, creating parent directories.

    Parameters
    ----------
    path : str or Path
        Destination file
    header : sequence of str
        Column names
    rows : iterable of sequences
        Row values, floats are written with ``repr`` precision

    Returns
    -------
    Path
        The written file
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return path


def read_csv(path: PathLike) -> list:
    """Read a CSV file written by :func:`write_csv` into a list of dicts."""
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def configure_threads(default: int = 1) -> int:
    """Cap torch intra-op threads from ``PROTO_MTL_THREADS``.

    Returns
    -------
    int
        The number of threads in effect
    """
    raw = os.getenv("PROTO_MTL_THREADS", str(default))
    try:
        threads = max(1, int(raw))
    except ValueError:
        threads = default
    torch.set_num_threads(threads)
    return threads


def state_checksum(module: torch.nn.Module) -> str:
    """Return a hex digest over every parameter and buffer of a module."""
    digest = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
