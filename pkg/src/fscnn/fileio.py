"""Binary PGM for viewing, a lossless text format for exact round-trips.

Text grid format::

    rows cols channels h x0 y0
    v v v ...            (channels*rows*cols values, channel-major, row-major)

Floats are written with ``repr`` so reading them back is bit-exact.
Parameter files hold one block per tensor::

    tensor <name> <ndim> <d0> <d1> ...
    v v v ...
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .grid import GridFunction, GridSpec


class ParseError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte {offset})")
        self.offset = offset


# --------------------------------------------------------------------------
# PGM


def to_bytes(values: np.ndarray, vmin: float, vmax: float) -> np.ndarray:
    """Linear map ``[vmin, vmax] -> [0, 255]`` with round-half-up and clipping."""
    if not vmax > vmin:
        raise ValueError(f"empty value range [{vmin}, {vmax}]")
    t = (np.asarray(values, dtype=np.float64) - vmin) / (vmax - vmin) * 255.0
    return np.clip(np.floor(t + 0.5), 0, 255).astype(np.uint8)


def write_pgm(path, u: GridFunction | np.ndarray, vmin: float = 0.0, vmax: float = 1.0, channel: int = 0) -> None:
    img = u.values[channel] if isinstance(u, GridFunction) else np.asarray(u)
    if img.ndim != 2:
        raise ValueError("PGM holds a single 2-d channel")
    rows, cols = img.shape
    header = f"P5\n# range {vmin!r} {vmax!r}\n{cols} {rows}\n255\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header + to_bytes(img, vmin, vmax).tobytes())


def _tokens(data: bytes, count: int, pos: int = 0):
    """First ``count`` header tokens from ``pos``, skipping comments; returns tokens, comments, data offset."""
    out, comments = [], []
    n = len(data)
    while len(out) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= n:
            raise ParseError("truncated header", pos)
        if data[pos : pos + 1] == b"#":
            end = data.find(b"\n", pos)
            end = n if end < 0 else end
            comments.append(data[pos + 1 : end].decode("ascii", "replace").strip())
            pos = end
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        out.append((data[start:pos], start))
    if pos >= n or not data[pos : pos + 1].isspace():
        raise ParseError("missing whitespace after header", pos)
    return out, comments, pos + 1


def read_pgm(path, h: float = 1.0) -> tuple[GridFunction, tuple[float, float] | None]:
    """Read a P5 file; values are mapped back through the ``# range`` comment if present."""
    data = Path(path).read_bytes()
    if len(data) < 2:
        raise ParseError("file too short for a magic number", 0)
    if data[:2] != b"P5":
        raise ParseError(f"unsupported magic {data[:2]!r}", 0)
    toks, comments, off = _tokens(data, 3, 2)
    vals = []
    for tok, where in toks:
        try:
            vals.append(int(tok))
        except ValueError:
            raise ParseError(f"expected an integer, got {tok!r}", where) from None
    cols, rows, maxval = vals
    if cols < 1 or rows < 1:
        raise ParseError("image sizes must be positive", toks[0][1])
    if not 0 < maxval < 256:
        raise ParseError(f"unsupported maxval {maxval}", toks[2][1])
    if len(data) - off < rows * cols:
        raise ParseError(f"pixel data truncated: need {rows * cols} bytes", len(data))
    px = np.frombuffer(data, dtype=np.uint8, count=rows * cols, offset=off).reshape(rows, cols)
    rng = None
    for c in comments:
        parts = c.split()
        if len(parts) == 3 and parts[0] == "range":
            rng = (float(parts[1]), float(parts[2]))
    lo, hi = rng if rng else (0.0, 1.0)
    values = lo + px.astype(np.float64) / maxval * (hi - lo)
    return GridFunction.from_array(values, h), rng


# --------------------------------------------------------------------------
# lossless text


def _fmt(a: np.ndarray) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(a, dtype=np.float64).ravel())


def write_grid_text(path, u: GridFunction) -> None:
    d = u.domain
    head = f"{u.spec.rows} {u.spec.cols} {u.channels} {u.h!r} {d.x0!r} {d.y0!r}\n"
    Path(path).write_text(head + _fmt(u.values) + "\n")


def read_grid_text(path) -> GridFunction:
    text = Path(path).read_text()
    nl = text.find("\n")
    if nl < 0:
        raise ParseError("missing header line", len(text))
    head = text[:nl].split()
    if len(head) != 6:
        raise ParseError(f"header needs 6 fields (rows cols channels h x0 y0), got {len(head)}", 0)
    try:
        rows, cols, ch = (int(v) for v in head[:3])
        h, x0, y0 = (float(v) for v in head[3:])
    except ValueError as e:
        raise ParseError(f"bad header: {e}", 0) from None
    body = text[nl + 1 :].split()
    if len(body) != rows * cols * ch:
        raise ParseError(f"expected {rows * cols * ch} values, got {len(body)}", nl + 1)
    vals = np.array([float(v) for v in body]).reshape(ch, rows, cols)
    return GridFunction(GridSpec.from_shape(rows, cols, h, x0, y0), vals)


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    lines = []
    for name, a in tensors.items():
        a = np.asarray(a, dtype=np.float64)
        lines.append(f"tensor {name} {a.ndim} " + " ".join(str(s) for s in a.shape))
        lines.append(_fmt(a))
    Path(path).write_text("\n".join(lines) + "\n")


def read_tensors(path) -> dict[str, np.ndarray]:
    out = {}
    lines = Path(path).read_text().splitlines()
    offset = 0
    i = 0
    while i < len(lines):
        line = lines[i]
        if not line.strip():
            offset += len(line) + 1
            i += 1
            continue
        parts = line.split()
        if parts[0] != "tensor" or len(parts) < 3:
            raise ParseError(f"expected a tensor header, got {line[:40]!r}", offset)
        name, ndim = parts[1], int(parts[2])
        shape = tuple(int(s) for s in parts[3 : 3 + ndim])
        if i + 1 >= len(lines):
            raise ParseError(f"tensor {name} has no values", offset + len(line) + 1)
        vals = [float(v) for v in lines[i + 1].split()]
        if len(vals) != int(np.prod(shape)):
            raise ParseError(f"tensor {name}: {len(vals)} values for shape {shape}", offset + len(line) + 1)
        out[name] = np.array(vals).reshape(shape)
        offset += len(line) + len(lines[i + 1]) + 2
        i += 2
    return out


def save_params(path, params) -> None:
    t = dict(params.flat())
    t["hs"] = np.array(params.hs)
    write_tensors(path, t)


def load_params(path):
    from .network import LayerParams, Params

    t = read_tensors(path)
    hs = tuple(float(v) for v in t.pop("hs", np.array([])))
    n = 1 + max(int(k.split(".")[0][5:]) for k in t)
    layers = [LayerParams(None, None) for _ in range(n)]
    for k, v in t.items():
        lname, field = k.split(".")
        setattr(layers[int(lname[5:])], field, v)
    return Params(layers, hs)


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
