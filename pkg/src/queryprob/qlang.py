"""Textual query language (v1): parser and printer.

Grammar (whitespace insignificant, one query per string)::

    query    := term | "and(" query {"," query} ")"
    term     := "count_objects(" classlist "," intlist ")" [",closed"]
              | "range_count_objects(" classlist "," intlist "," intlist ")" [",closed"]
              | "count_in(" class "," nat "," (nat|"inf") ")" [",closed"]
              | "presence(" classlist ")"
              | "sum_objects(" nat ")"
    classlist:= "[" [class {"," class}] "]"
    intlist  := "[" [int {"," int}] "]"
    class    := identifier (letters, digits, underscores)

``count_objects`` lists exact per-class counts.  ``range_count_objects``
carries a third list of indicators: 0 = exactly, 1 = strictly more, -1 =
strictly fewer.  ``count_in`` states an explicit half-open interval [a, b).
``sum_objects`` constrains the value-weighted sum of all labels.  The
",closed" suffix additionally forbids classes not listed in the constraint
(ignored classes excepted).

Parsing normalizes conjunctions: nested ``and`` is flattened, open-mode count
constraints are merged (duplicate classes intersect their intervals), presence
lists are unioned, and equal sum targets collapse.
"""

from __future__ import annotations

import re
from typing import Optional

from .core import (
    And,
    CountConstraints,
    InputError,
    Interval,
    LabelVocab,
    Presence,
    Query,
    Sum,
    indicator_to_interval,
    validate_query,
)


class QuerySyntaxError(InputError):
    """Malformed query text; carries the byte offset of the failure."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at offset {position})")
        self.position = position


class ListLengthMismatch(InputError):
    pass


class DuplicateClass(InputError):
    pass


class UnsatisfiableConstraint(InputError):
    pass


_TOKEN_RE = re.compile(r"\s*(?:(?P<word>[A-Za-z0-9_]+)|(?P<punct>[()\[\],-]))")


def _tokenize(text: str) -> list[tuple[str, int]]:
    """Split into (token, byte offset) pairs; whitespace is insignificant."""
    tokens = []
    pos = 0
    while pos < len(text):
        match = _TOKEN_RE.match(text, pos)
        if match is None:
            stripped = text[pos:].lstrip()
            if not stripped:
                break
            raise QuerySyntaxError(
                f"unexpected character {stripped[0]!r}", len(text) - len(stripped)
            )
        token = match.group("word") or match.group("punct")
        tokens.append((token, match.end() - len(token)))
        pos = match.end()
    return tokens


class _Parser:
    def __init__(self, text: str, vocab: LabelVocab):
        self.text = text
        self.vocab = vocab
        self.tokens = _tokenize(text)
        self.i = 0

    def _peek(self) -> Optional[str]:
        return self.tokens[self.i][0] if self.i < len(self.tokens) else None

    def _position(self) -> int:
        if self.i < len(self.tokens):
            return self.tokens[self.i][1]
        return len(self.text)

    def _next(self, expected: str) -> str:
        tok = self._peek()
        if tok is None:
            raise QuerySyntaxError(f"expected {expected}, found end of input", self._position())
        self.i += 1
        return tok

    def _expect(self, literal: str):
        tok = self._next(repr(literal))
        if tok != literal:
            self.i -= 1
            raise QuerySyntaxError(f"expected {literal!r}, found {tok!r}", self._position())

    def parse(self) -> Query:
        query = self._query()
        if self.i < len(self.tokens):
            raise QuerySyntaxError(
                f"trailing input {self._peek()!r} after query", self._position()
            )
        return validate_query(query, self.vocab)

    def _query(self) -> Query:
        head = self._peek()
        if head == "and":
            self._expect("and")
            self._expect("(")
            parts = [self._query()]
            while self._peek() == ",":
                self._expect(",")
                parts.append(self._query())
            self._expect(")")
            return _normalize_and(parts)
        return self._term()

    def _term(self) -> Query:
        head = self._next("a query keyword")
        if head == "count_objects":
            self._expect("(")
            classes = self._classlist()
            self._expect(",")
            counts = self._intlist()
            self._expect(")")
            if len(classes) != len(counts):
                raise ListLengthMismatch(
                    f"count_objects: {len(classes)} classes but {len(counts)} counts"
                )
            items = tuple(
                (name, Interval(self._nonneg(c), self._nonneg(c) + 1))
                for name, c in zip(classes, counts)
            )
            return CountConstraints(items, self._mode_suffix())
        if head == "range_count_objects":
            self._expect("(")
            classes = self._classlist()
            self._expect(",")
            counts = self._intlist()
            self._expect(",")
            indicators = self._intlist()
            self._expect(")")
            if not (len(classes) == len(counts) == len(indicators)):
                raise ListLengthMismatch(
                    "range_count_objects: class, count and indicator lists differ in length"
                )
            items = tuple(
                (name, indicator_to_interval(c, a))
                for name, c, a in zip(classes, counts, indicators)
            )
            return CountConstraints(items, self._mode_suffix())
        if head == "count_in":
            self._expect("(")
            name = self._classname()
            self._expect(",")
            lo = self._nat()
            self._expect(",")
            hi = None if self._peek() == "inf" else self._nat()
            if hi is None:
                self._expect("inf")
            self._expect(")")
            return CountConstraints(((name, Interval(lo, hi)),), self._mode_suffix())
        if head == "presence":
            self._expect("(")
            classes = self._classlist()
            self._expect(")")
            return Presence(classes)
        if head == "sum_objects":
            self._expect("(")
            target = self._nat()
            self._expect(")")
            return Sum(target)
        self.i -= 1
        raise QuerySyntaxError(f"expected a query keyword, found {head!r}", self._position())

    def _mode_suffix(self) -> str:
        if self._peek() == "," and self.i + 1 < len(self.tokens) and self.tokens[self.i + 1][0] == "closed":
            self._expect(",")
            self._expect("closed")
            return "closed"
        return "open"

    def _classlist(self) -> tuple[str, ...]:
        self._expect("[")
        names: list[str] = []
        if self._peek() != "]":
            names.append(self._classname())
            while self._peek() == ",":
                self._expect(",")
                names.append(self._classname())
        self._expect("]")
        if len(set(names)) != len(names):
            raise DuplicateClass(f"duplicate class in list: {names}")
        return tuple(names)

    def _classname(self) -> str:
        tok = self._next("a class name")
        if not re.fullmatch(r"[A-Za-z0-9_]+", tok):
            self.i -= 1
            raise QuerySyntaxError(f"expected a class name, found {tok!r}", self._position())
        self.vocab.index(tok)
        return tok

    def _intlist(self) -> tuple[int, ...]:
        self._expect("[")
        values: list[int] = []
        if self._peek() != "]":
            values.append(self._int())
            while self._peek() == ",":
                self._expect(",")
                values.append(self._int())
        self._expect("]")
        return tuple(values)

    def _int(self) -> int:
        sign = 1
        if self._peek() == "-":
            self._expect("-")
            sign = -1
        tok = self._next("an integer")
        if not tok.isdigit():
            self.i -= 1
            raise QuerySyntaxError(f"expected an integer, found {tok!r}", self._position())
        return sign * int(tok)

    def _nat(self) -> int:
        value = self._int()
        if value < 0:
            raise QuerySyntaxError(f"expected a nonnegative integer, got {value}", self._position())
        return value

    def _nonneg(self, count: int) -> int:
        if count < 0:
            raise QuerySyntaxError(f"count must be >= 0, got {count}", self._position())
        return count


def _normalize_and(parts: list[Query]) -> Query:
    """Flatten nested conjunctions and merge compatible conjuncts.

    Open-mode count constraints merge into one node (duplicate classes
    intersect); closed-mode nodes are kept separate because their listed-class
    restrictions do not union.  Presence lists merge; equal sum targets
    collapse, unequal ones are rejected.
    """
    flat: list[Query] = []
    for part in parts:
        if isinstance(part, And):
            flat.extend(part.parts)
        else:
            flat.append(part)

    merged: list[Query] = []
    open_counts: Optional[int] = None
    presence: Optional[int] = None
    sum_at: Optional[int] = None
    for part in flat:
        if isinstance(part, CountConstraints) and part.mode == "open":
            if open_counts is None:
                open_counts = len(merged)
                merged.append(part)
            else:
                merged[open_counts] = _merge_counts(merged[open_counts], part)
        elif isinstance(part, Presence):
            if presence is None:
                presence = len(merged)
                merged.append(part)
            else:
                existing = merged[presence]
                assert isinstance(existing, Presence)
                extra = tuple(c for c in part.classes if c not in existing.classes)
                merged[presence] = Presence(existing.classes + extra)
        elif isinstance(part, Sum):
            if sum_at is None:
                sum_at = len(merged)
                merged.append(part)
            else:
                existing = merged[sum_at]
                assert isinstance(existing, Sum)
                if existing.target != part.target:
                    raise UnsatisfiableConstraint(
                        f"conflicting sum targets {existing.target} and {part.target}"
                    )
        else:
            merged.append(part)
    if len(merged) == 1:
        return merged[0]
    return And(tuple(merged))


def _merge_counts(a: CountConstraints, b: CountConstraints) -> CountConstraints:
    items = list(a.items)
    index = {name: k for k, (name, _) in enumerate(items)}
    for name, interval in b.items:
        if name in index:
            k = index[name]
            try:
                items[k] = (name, items[k][1].intersect(interval))
            except InputError:
                raise UnsatisfiableConstraint(
                    f"empty count interval for class {name!r} after conjunction"
                ) from None
        else:
            index[name] = len(items)
            items.append((name, interval))
    return CountConstraints(tuple(items), "open")


def parse(text: str, vocab: LabelVocab) -> Query:
    """Parse a v1 query string against a vocabulary."""
    parser = _Parser(text, vocab)
    if not parser.tokens:
        raise QuerySyntaxError("empty query", 0)
    return parser.parse()


def print_query(query: Query) -> str:
    """Render a query as canonical v1 text.

    Exact intervals use the ``count_objects`` form; other intervals fall back
    to ``count_in`` (joined by ``and`` when a constraint lists several
    classes).  ``parse(print_query(q))`` is structurally equal to ``q`` for
    queries in parse-normal form.
    """
    if isinstance(query, CountConstraints):
        suffix = ",closed" if query.mode == "closed" else ""
        if all(interval.is_exact for _, interval in query.items):
            names = ",".join(name for name, _ in query.items)
            counts = ",".join(str(interval.lo) for _, interval in query.items)
            return f"count_objects([{names}],[{counts}]){suffix}"
        terms = [
            f"count_in({name},{interval.lo},{'inf' if interval.hi is None else interval.hi}){suffix}"
            for name, interval in query.items
        ]
        if len(terms) == 1:
            return terms[0]
        return "and(" + ",".join(terms) + ")"
    if isinstance(query, Presence):
        return "presence([" + ",".join(query.classes) + "])"
    if isinstance(query, Sum):
        return f"sum_objects({query.target})"
    if isinstance(query, And):
        rendered = []
        for part in query.parts:
            text = print_query(part)
            if isinstance(part, And):
                text = text[len("and(") : -1]
            rendered.append(text)
        return "and(" + ",".join(rendered) + ")"
    raise InputError(f"not a query: {query!r}")
