"""Plain-text records and tables shared by every file-writing module.

Two shapes cover all outputs: a record (one `key value` pair per line)
for scalar summaries, and a tab-separated table for anything row-shaped.
Both start with a `# format: <name> v1` line so downstream readers can
refuse files they do not understand. Values round-trip exactly: floats
are written with repr (shortest form that parses back to the same
float) and missing values are written as the word `none`.

Timestamps never appear in these files; they live in a metadata sidecar
(`write_meta`) so reruns with the same seed produce byte-identical
outputs.
"""

from __future__ import annotations

import os
import time

from .errors import ParseError

FORMAT_VERSION = "v1"


def fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(token: str):
    if token == "none":
        return None
    if token == "true":
        return True
    if token == "false":
        return False
    try:
        return int(token)
    except ValueError:
        pass
    try:
        return float(token)
    except ValueError:
        return token


def _format_line(name: str) -> str:
    return f"# format: {name} {FORMAT_VERSION}"


def _check_header(line: str, path: str) -> str:
    parts = line.strip().split()
    if len(parts) != 4 or parts[:2] != ["#", "format:"]:
        raise ParseError(f"missing '# format: <name> {FORMAT_VERSION}' header",
                         path=path, line=1)
    name, version = parts[2], parts[3]
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported format version {version!r}",
                         path=path, line=1)
    return name


def write_record(path, name: str, mapping: dict) -> None:
    with open(path, "w", encoding="utf-8") as fp:
        fp.write(_format_line(name) + "\n")
        for key, value in mapping.items():
            fp.write(f"{key} {fmt(value)}\n")


def read_record(path) -> tuple[str, dict]:
    with open(path, encoding="utf-8") as fp:
        lines = fp.read().splitlines()
    if not lines:
        raise ParseError("empty record file", path=str(path), line=1)
    name = _check_header(lines[0], str(path))
    mapping = {}
    for no, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, _, rest = line.partition(" ")
        if not rest:
            raise ParseError(f"record line needs 'key value', got {line!r}",
                             path=str(path), line=no)
        mapping[key] = _parse(rest.strip())
    return name, mapping


def write_table(path, name: str, columns: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8") as fp:
        fp.write(_format_line(name) + "\n")
        fp.write("\t".join(columns) + "\n")
        for row in rows:
            if len(row) != len(columns):
                raise ValueError(
                    f"row width {len(row)} != {len(columns)} columns")
            fp.write("\t".join(fmt(cell) for cell in row) + "\n")


def read_table(path) -> tuple[str, list[str], list[list]]:
    with open(path, encoding="utf-8") as fp:
        lines = fp.read().splitlines()
    if len(lines) < 2:
        raise ParseError("table needs a format line and a column header",
                         path=str(path), line=1)
    name = _check_header(lines[0], str(path))
    columns = lines[1].split("\t")
    rows = []
    for no, line in enumerate(lines[2:], start=3):
        if not line:
            continue
        cells = [_parse(tok) for tok in line.split("\t")]
        if len(cells) != len(columns):
            raise ParseError(f"row width {len(cells)} != {len(columns)}",
                             path=str(path), line=no)
        rows.append(cells)
    return name, columns, rows


def write_meta(path, **fields) -> None:
    """Run metadata (timestamps and the like), kept out of data files."""
    with open(path, "w", encoding="utf-8") as fp:
        fp.write(_format_line("meta") + "\n")
        fp.write(f"written_at {time.strftime('%Y-%m-%dT%H:%M:%S')}\n")
        fp.write(f"pid {os.getpid()}\n")
        for key, value in fields.items():
            fp.write(f"{key} {fmt(value)}\n")
