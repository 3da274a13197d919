"""Plain-text tensor files.

Sparse format (``.tns``)::

    3                  # number of modes N
    4 5 6              # shape
    1 1 1 0.5          # one line per nonzero: N one-based indices, value
    4 2 6 -1.25

Dense format (``.dns``)::

    4 5 6              # shape
    0.5 0.0 ...        # prod(shape) values, first mode fastest

Blank lines and ``#`` comments are ignored.  Values are written with 17
significant digits, so a write/read round trip is exact.
"""
from __future__ import annotations

from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor_core import DenseTensor, SparseTensor, Tensor

__all__ = ["TensorFormatError", "load_tensor", "write_tensor", "detect_format"]

FORMATS = ("sparse", "dense")


class TensorFormatError(ValueError):
    """Malformed tensor file; carries the 1-based line and column."""

    def __init__(self, path, line: int, column: int, message: str):
        self.path = str(path)
        self.line = line
        self.column = column
        super().__init__(f"{path}:{line}:{column}: {message}")


def _tokens(text: str) -> Iterator[tuple[int, list[tuple[int, str]]]]:
    """Yield ``(line_number, [(column, token), ...])`` for non-empty lines."""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        toks = []
        col = 0
        for tok in line.split():
            col = line.index(tok, col)
            toks.append((col + 1, tok))
            col += len(tok)
        if toks:
            yield lineno, toks


def detect_format(path) -> str:
    """Guess the format: by suffix, else by the shape of the first lines."""
    suffix = Path(path).suffix.lower()
    if suffix == ".tns":
        return "sparse"
    if suffix == ".dns":
        return "dense"
    lines = _tokens(Path(path).read_text())
    first = next(lines, None)
    second = next(lines, None)
    if first and second and len(first[1]) == 1 and len(second[1]) == _int_or(first[1][0][1], -1):
        return "sparse"
    return "dense"


def _int_or(tok: str, default: int) -> int:
    try:
        return int(tok)
    except ValueError:
        return default


def _parse_int(path, lineno, col, tok, what) -> int:
    try:
        return int(tok)
    except ValueError:
        raise TensorFormatError(path, lineno, col, f"expected an integer {what}, got {tok!r}") from None


def _parse_float(path, lineno, col, tok) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise TensorFormatError(path, lineno, col, f"expected a number, got {tok!r}") from None
    if not np.isfinite(v):
        raise TensorFormatError(path, lineno, col, f"non-finite value {tok!r}")
    return v


def _parse_shape(path, lineno, toks) -> tuple[int, ...]:
    shape = []
    for col, tok in toks:
        size = _parse_int(path, lineno, col, tok, "mode size")
        if size < 1:
            raise TensorFormatError(path, lineno, col, f"mode size must be positive, got {size}")
        shape.append(size)
    return tuple(shape)


def _load_sparse(path, text: str) -> SparseTensor:
    lines = _tokens(text)
    head = next(lines, None)
    if head is None:
        raise TensorFormatError(path, 1, 1, "empty file")
    lineno, toks = head
    if len(toks) != 1:
        raise TensorFormatError(path, lineno, toks[1][0], "header must hold only the number of modes")
    ndim = _parse_int(path, lineno, toks[0][0], toks[0][1], "number of modes")
    if ndim < 1:
        raise TensorFormatError(path, lineno, toks[0][0], "number of modes must be positive")
    shape_line = next(lines, None)
    if shape_line is None:
        raise TensorFormatError(path, lineno + 1, 1, "missing shape line")
    lineno, toks = shape_line
    if len(toks) != ndim:
        raise TensorFormatError(path, lineno, toks[0][0],
                                f"shape has {len(toks)} sizes but the header says {ndim} modes")
    shape = _parse_shape(path, lineno, toks)

    subs, vals, seen = [], [], {}
    for lineno, toks in lines:
        if len(toks) != ndim + 1:
            raise TensorFormatError(path, lineno, toks[0][0],
                                    f"expected {ndim} indices and a value, got {len(toks)} fields")
        idx = []
        for k, (col, tok) in enumerate(toks[:-1]):
            i = _parse_int(path, lineno, col, tok, "index")
            if not 1 <= i <= shape[k]:
                raise TensorFormatError(path, lineno, col,
                                        f"index {i} out of range 1..{shape[k]} for mode {k + 1}")
            idx.append(i - 1)
        key = tuple(idx)
        if key in seen:
            raise TensorFormatError(path, lineno, toks[0][0],
                                    f"duplicate index (first given on line {seen[key]})")
        seen[key] = lineno
        subs.append(idx)
        vals.append(_parse_float(path, lineno, toks[-1][0], toks[-1][1]))
    subs_arr = np.array(subs, dtype=np.int64).reshape(len(subs), ndim)
    return SparseTensor(subs_arr, np.array(vals, dtype=np.float64), shape)


def _load_dense(path, text: str) -> DenseTensor:
    lines = _tokens(text)
    head = next(lines, None)
    if head is None:
        raise TensorFormatError(path, 1, 1, "empty file")
    lineno, toks = head
    shape = _parse_shape(path, lineno, toks)
    expected = int(np.prod(shape))
    values = []
    last = (lineno, 1)
    for lineno, toks in lines:
        for col, tok in toks:
            if len(values) == expected:
                raise TensorFormatError(path, lineno, col,
                                        f"more than the {expected} values the shape {shape} requires")
            values.append(_parse_float(path, lineno, col, tok))
        last = (lineno, toks[-1][0])
    if len(values) != expected:
        raise TensorFormatError(path, *last,
                                f"shape {shape} requires {expected} values, found {len(values)}")
    return DenseTensor.from_values(shape, np.array(values))


def load_tensor(path, format: str = "auto") -> Tensor:
    """Read a tensor file in the sparse or dense text format.

    Raises
    ------
    TensorFormatError
        With the offending line and column when the file is malformed.
    """
    path = Path(path)
    if format == "auto":
        format = detect_format(path)
    if format not in FORMATS:
        raise ValueError(f"unknown tensor format {format!r}")
    text = path.read_text()
    return _load_sparse(path, text) if format == "sparse" else _load_dense(path, text)


def write_tensor(path, t: Tensor, format: str | None = None) -> None:
    """Write ``t``; the format defaults to the tensor's own storage."""
    if format is None:
        format = "sparse" if isinstance(t, SparseTensor) else "dense"
    if format not in FORMATS:
        raise ValueError(f"unknown tensor format {format!r}")
    with open(path, "w") as fh:
        if format == "sparse":
            s = t if isinstance(t, SparseTensor) else SparseTensor.from_dense(t)
            fh.write(f"{s.ndim}\n")
            fh.write(" ".join(map(str, s.shape)) + "\n")
            for idx, v in zip(s.subs + 1, s.vals):
                fh.write(" ".join(map(str, idx.tolist())) + f" {v:.17g}\n")
        else:
            d = t.todense() if isinstance(t, SparseTensor) else t
            fh.write(" ".join(map(str, d.shape)) + "\n")
            vals = d.values
            for start in range(0, vals.size, 8):
                fh.write(" ".join(f"{v:.17g}" for v in vals[start:start + 8]) + "\n")
