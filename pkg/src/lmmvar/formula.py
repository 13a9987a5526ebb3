"""Model-formula grammar for variance-components mixed models.

Accepted grammar::

    formula := NAME "~" term ("+" term)*
    term    := NAME | "1" | "(" slopes ("||" | "|") NAME ")"
    slopes  := ["0" "+"] slope ("+" slope)*
    slope   := "1" | NAME

Random-effect blocks are always independent (diagonal covariance), so ``|``
is read as ``||`` and a :class:`CorrelationIgnoredWarning` is issued.
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field

__all__ = [
    "CorrelationIgnoredWarning",
    "FormulaAst",
    "FormulaError",
    "RandomTerm",
    "parse_formula",
    "render_formula",
]

INTERCEPT = "1"


class FormulaError(ValueError):
    """Raised for malformed formulas; ``position`` is a byte offset into the text."""

    def __init__(self, message: str, position: int):
        self.position = position
        super().__init__(f"{message} (at byte {position})")


class CorrelationIgnoredWarning(UserWarning):
    pass


@dataclass(frozen=True)
class RandomTerm:
    """One independent random-effect block: ``term`` varies by levels of ``group``."""

    term: str
    group: str

    @property
    def is_intercept(self) -> bool:
        return self.term == INTERCEPT


@dataclass(frozen=True)
class FormulaAst:
    response: str
    fixed_terms: tuple[str, ...] = ()
    random_specs: tuple[RandomTerm, ...] = field(default_factory=tuple)

    @property
    def columns(self) -> set[str]:
        cols = {self.response, *self.fixed_terms}
        for spec in self.random_specs:
            cols.add(spec.group)
            if not spec.is_intercept:
                cols.add(spec.term)
        return cols


_TOKEN_RE = re.compile(
    r"\s*(?:(?P<name>[A-Za-z_.][A-Za-z0-9_.]*)|(?P<num>\d+)|(?P<op>\|\||[~+()|\-:*/]))"
)


@dataclass(frozen=True)
class _Token:
    kind: str
    text: str
    pos: int  # byte offset


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    i = 0
    while i < len(text):
        if text[i:].strip() == "":
            break
        m = _TOKEN_RE.match(text, i)
        if m is None or m.end() == i:
            j = i
            while j < len(text) and text[j].isspace():
                j += 1
            raise FormulaError(f"unexpected character {text[j]!r}", _byte_offset(text, j))
        kind = m.lastgroup
        tokens.append(_Token(kind, m.group(kind), _byte_offset(text, m.start(kind))))
        i = m.end()
    tokens.append(_Token("end", "", _byte_offset(text, len(text))))
    return tokens


def _byte_offset(text: str, index: int) -> int:
    return len(text[:index].encode("utf-8"))


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.i = 0

    @property
    def tok(self) -> _Token:
        return self.tokens[self.i]

    def advance(self) -> _Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, kind: str, text: str | None = None) -> _Token:
        tok = self.tok
        if tok.kind != kind or (text is not None and tok.text != text):
            want = repr(text) if text is not None else kind
            got = repr(tok.text) if tok.text else "end of formula"
            raise FormulaError(f"expected {want}, found {got}", tok.pos)
        return self.advance()

    def reject_unsupported(self):
        tok = self.tok
        if tok.kind == "op" and tok.text in {":", "*", "/"}:
            raise FormulaError(
                f"operator {tok.text!r} is not supported; precompute the column instead", tok.pos
            )
        if tok.kind == "op" and tok.text == "-":
            raise FormulaError("term removal with '-' is not supported (the intercept is mandatory)", tok.pos)

    def parse(self) -> tuple[str, list, list]:
        response = self.expect("name").text
        self.reject_unsupported()
        self.expect("op", "~")
        fixed: list[tuple[str, int]] = []
        random: list[tuple[RandomTerm, int]] = []
        self.term(fixed, random)
        while self.tok.kind == "op" and self.tok.text == "+":
            self.advance()
            self.term(fixed, random)
        self.reject_unsupported()
        if self.tok.kind != "end":
            raise FormulaError(f"unexpected {self.tok.text!r}", self.tok.pos)
        return response, fixed, random

    def term(self, fixed, random):
        tok = self.tok
        self.reject_unsupported()
        if tok.kind == "name":
            self.advance()
            fixed.append((tok.text, tok.pos))
        elif tok.kind == "num":
            self.advance()
            if tok.text != INTERCEPT:
                raise FormulaError("the intercept cannot be removed from the fixed part", tok.pos)
        elif tok.kind == "op" and tok.text == "(":
            self.advance()
            self.random_term(random)
        else:
            got = repr(tok.text) if tok.text else "end of formula"
            raise FormulaError(f"expected a term, found {got}", tok.pos)
        self.reject_unsupported()

    def random_term(self, random):
        start = self.tok.pos
        slopes: list[str] = []
        intercept = True
        if self.tok.kind == "num" and self.tok.text == "0":
            self.advance()
            intercept = False
            if self.tok.kind == "op" and self.tok.text == "+":
                self.advance()
            elif self.tok.kind == "op" and self.tok.text in {"|", "||"}:
                raise FormulaError("random term has no components", start)
            else:
                self.expect("op", "+")
            slopes.append(self.slope())
        else:
            slopes.append(self.slope())
        while self.tok.kind == "op" and self.tok.text == "+":
            self.advance()
            slopes.append(self.slope())
        bar = self.tok
        if not (bar.kind == "op" and bar.text in {"|", "||"}):
            self.reject_unsupported()
            raise FormulaError("expected '|' or '||' in random term", bar.pos)
        self.advance()
        if bar.text == "|":
            warnings.warn(
                "'|' requests correlated random effects; they are fitted as "
                "independent components ('||')",
                CorrelationIgnoredWarning,
                stacklevel=4,
            )
        group = self.expect("name").text
        self.reject_unsupported()
        self.expect("op", ")")
        terms = []
        if intercept or INTERCEPT in slopes:
            terms.append(INTERCEPT)
        terms.extend(s for s in slopes if s != INTERCEPT)
        seen = set()
        for term in terms:
            if term in seen:
                raise FormulaError(f"duplicate slope {term!r} for group {group!r}", start)
            seen.add(term)
            random.append((RandomTerm(term, group), start))

    def slope(self) -> str:
        tok = self.tok
        self.reject_unsupported()
        if tok.kind == "name":
            self.advance()
            return tok.text
        if tok.kind == "num" and tok.text == INTERCEPT:
            self.advance()
            return INTERCEPT
        got = repr(tok.text) if tok.text else "end of formula"
        raise FormulaError(f"expected a slope variable or '1', found {got}", tok.pos)


def parse_formula(text: str) -> FormulaAst:
    """Parse ``text`` into a :class:`FormulaAst`.

    Examples
    --------
    >>> parse_formula("Reaction ~ Days + (Days || Subject)").random_specs
    (RandomTerm(term='1', group='Subject'), RandomTerm(term='Days', group='Subject'))
    """
    if not text or not text.strip():
        raise FormulaError("empty formula", 0)
    response, fixed, random = _Parser(text).parse()

    seen_fixed = set()
    for name, pos in fixed:
        if name == response:
            raise FormulaError(f"response {response!r} used as a predictor", pos)
        if name in seen_fixed:
            raise FormulaError(f"duplicate fixed term {name!r}", pos)
        seen_fixed.add(name)
    seen_random = set()
    for spec, pos in random:
        if response in (spec.term, spec.group):
            raise FormulaError(f"response {response!r} used as a predictor", pos)
        if spec in seen_random:
            raise FormulaError(f"duplicate random term ({spec.term} || {spec.group})", pos)
        seen_random.add(spec)

    return FormulaAst(
        response=response,
        fixed_terms=tuple(name for name, _ in fixed),
        random_specs=tuple(spec for spec, _ in random),
    )


def render_formula(ast: FormulaAst) -> str:
    """Canonical text for ``ast``; ``parse_formula(render_formula(a)) == a``."""
    parts = list(ast.fixed_terms)
    for spec in ast.random_specs:
        if spec.is_intercept:
            parts.append(f"(1 || {spec.group})")
        else:
            parts.append(f"(0 + {spec.term} || {spec.group})")
    return f"{ast.response} ~ " + (" + ".join(parts) if parts else "1")
