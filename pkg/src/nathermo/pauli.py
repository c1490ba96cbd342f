"""Real linear combinations of Pauli strings.

Grammar (whitespace is ignored)::

    expr   := [sign] term (sign term)*
    sign   := '+' | '-'
    term   := [number '*'] string
    string := n_sites letters from I, X, Y, Z
    number := decimal literal with optional exponent, e.g. 2, 0.5, .5, 1e-3

Site order left to right is tensor-factor order, so "XZ" is X (x) Z.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import reduce

import numpy as np

from .linalg import PAULI, DimensionError, HermitianOperator

MAX_SITES = 6

_NUMBER = re.compile(r"(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?")
_WORD = re.compile(r"[A-Za-z]+")


class PauliParseError(ValueError):
    def __init__(self, offset: int, message: str):
        self.offset = offset
        self.message = message
        super().__init__(f"offset {offset}: {message}")


@dataclass(frozen=True)
class PauliExpr:
    """Canonical form: strings sorted, duplicates merged, zeros dropped."""

    terms: tuple[tuple[float, str], ...]
    n_sites: int

    def __post_init__(self):
        if self.n_sites < 1:
            raise ValueError("n_sites must be positive")
        merged: dict[str, float] = {}
        for coeff, s in self.terms:
            if len(s) != self.n_sites or set(s) - set("IXYZ"):
                raise ValueError(f"invalid Pauli string {s!r} for {self.n_sites} sites")
            merged[s] = merged.get(s, 0.0) + float(coeff)
        canon = tuple((c, s) for s, c in sorted(merged.items()) if c != 0.0)
        object.__setattr__(self, "terms", canon)

    def __add__(self, other: PauliExpr) -> PauliExpr:
        if other.n_sites != self.n_sites:
            raise DimensionError("cannot add expressions over different site counts")
        return PauliExpr(self.terms + other.terms, self.n_sites)

    def scaled(self, c: float) -> PauliExpr:
        return PauliExpr(tuple((c * a, s) for a, s in self.terms), self.n_sites)

    def __str__(self) -> str:
        return format_pauli_expr(self)


def format_pauli_expr(e: PauliExpr) -> str:
    """Text form that re-parses to an identical value (``repr`` floats)."""
    if not e.terms:
        return "0*" + "I" * e.n_sites
    parts = []
    for k, (c, s) in enumerate(e.terms):
        sign = "-" if c < 0 else "+"
        body = f"{abs(c)!r}*{s}"
        if k == 0:
            parts.append(body if sign == "+" else "-" + body)
        else:
            parts.append(f" {sign} {body}")
    return "".join(parts)


def parse_pauli_expr(text: str, n_sites: int) -> PauliExpr:
    if n_sites < 1:
        raise ValueError("n_sites must be positive")
    pos = 0
    n = len(text)

    def skip_ws():
        nonlocal pos
        while pos < n and text[pos].isspace():
            pos += 1

    skip_ws()
    if pos == n:
        raise PauliParseError(pos, "empty expression")

    terms = []
    first = True
    while True:
        skip_ws()
        sign = 1.0
        if pos < n and text[pos] in "+-":
            sign = -1.0 if text[pos] == "-" else 1.0
            pos += 1
            skip_ws()
        elif not first:
            if pos < n:
                raise PauliParseError(pos, f"expected '+' or '-', found {text[pos]!r}")
            break
        if pos == n:
            raise PauliParseError(pos, "expected a term, found end of input")
        first = False

        coeff = 1.0
        if text[pos].isdigit() or text[pos] == ".":
            m = _NUMBER.match(text, pos)
            if m is None or (m.end() < n and (text[m.end()].isdigit() or text[m.end()] in ".eE")):
                raise PauliParseError(pos, "malformed number")
            coeff = float(m.group())
            pos = m.end()
            skip_ws()
            if pos == n or text[pos] != "*":
                raise PauliParseError(pos, "expected '*' after coefficient")
            pos += 1
            skip_ws()

        m = _WORD.match(text, pos)
        if m is None:
            found = repr(text[pos]) if pos < n else "end of input"
            raise PauliParseError(pos, f"expected a Pauli string, found {found}")
        word = m.group()
        for k, ch in enumerate(word):
            if ch not in "IXYZ":
                raise PauliParseError(pos + k, f"unknown Pauli letter {ch!r}")
        if len(word) != n_sites:
            raise PauliParseError(
                pos, f"wrong string length: {word!r} has {len(word)} sites, expected {n_sites}"
            )
        terms.append((sign * coeff, word))
        pos = m.end()
        skip_ws()
        if pos == n:
            break
    return PauliExpr(tuple(terms), n_sites)


def pauli_string_matrix(s: str) -> np.ndarray:
    return reduce(np.kron, (PAULI[ch] for ch in s))


def expr_to_matrix(e: PauliExpr) -> HermitianOperator:
    if e.n_sites > MAX_SITES:
        raise DimensionError(
            f"{e.n_sites} sites exceed the cap of {MAX_SITES} (dimension {2 ** MAX_SITES})"
        )
    dim = 2**e.n_sites
    m = np.zeros((dim, dim), dtype=complex)
    for c, s in e.terms:
        m += c * pauli_string_matrix(s)
    return HermitianOperator(m, format_pauli_expr(e))
