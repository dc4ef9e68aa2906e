"""Unroll levels, loop plans and affine index expressions for emitted C."""

from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass


@dataclass(frozen=True)
class UnrollLevel:
    """How many outermost loop nests stay as C ``for`` loops.

    ``keep_outer=None`` means nothing is unrolled, ``0`` means everything is,
    ``n >= 1`` leaves the outermost ``n`` loops rolled.
    """

    keep_outer: int | None = None

    def __post_init__(self):
        if self.keep_outer is not None and self.keep_outer < 0:
            raise ValueError(f"keep_outer must be >= 0, got {self.keep_outer}")

    @classmethod
    def none(cls) -> UnrollLevel:
        return cls(None)

    @classmethod
    def full(cls) -> UnrollLevel:
        return cls(0)

    @classmethod
    def keep(cls, n: int) -> UnrollLevel:
        if n < 1:
            raise ValueError(f"KeepOuter needs n >= 1, got {n}")
        return cls(n)

    @classmethod
    def parse(cls, text: str) -> UnrollLevel:
        text = text.strip().lower()
        if text == "none":
            return cls.none()
        if text == "full":
            return cls.full()
        match = re.fullmatch(r"outer:(\d+)", text)
        if match and int(match.group(1)) >= 1:
            return cls.keep(int(match.group(1)))
        raise ValueError(f"unroll level must be 'none', 'full' or 'outer:N' (N >= 1), got {text!r}")

    def rolled_count(self, depth: int) -> int:
        if self.keep_outer is None:
            return depth
        return min(self.keep_outer, depth)

    def __str__(self) -> str:
        if self.keep_outer is None:
            return "none"
        if self.keep_outer == 0:
            return "full"
        return f"outer:{self.keep_outer}"


@dataclass(frozen=True)
class LoopPlan:
    extents: tuple[int, ...]
    rolled: tuple[bool, ...]

    @property
    def for_loops(self) -> int:
        return sum(self.rolled)

    @property
    def body_instances(self) -> int:
        """Copies of the innermost body written out in the source."""
        return math.prod(e for e, r in zip(self.extents, self.rolled) if not r)

    @property
    def straight_line(self) -> bool:
        return not any(self.rolled)


def plan_unroll(extents, level: UnrollLevel) -> LoopPlan:
    extents = tuple(int(e) for e in extents)
    n = level.rolled_count(len(extents))
    return LoopPlan(extents, tuple(i < n for i in range(len(extents))))


class Ix:
    """Affine integer expression over C loop variables, e.g. ``i*48 + j*8 + 3``."""

    __slots__ = ("terms", "const")

    def __init__(self, terms=None, const: int = 0):
        self.terms = {v: c for v, c in (terms or {}).items() if c}
        self.const = const

    @classmethod
    def var(cls, name: str) -> Ix:
        return cls({name: 1})

    @staticmethod
    def lift(value) -> Ix:
        return value if isinstance(value, Ix) else Ix(const=int(value))

    @property
    def is_const(self) -> bool:
        return not self.terms

    @property
    def variables(self) -> set[str]:
        return set(self.terms)

    def __add__(self, other) -> Ix:
        other = Ix.lift(other)
        terms = dict(self.terms)
        for v, c in other.terms.items():
            terms[v] = terms.get(v, 0) + c
        return Ix(terms, self.const + other.const)

    __radd__ = __add__

    def __sub__(self, other) -> Ix:
        return self + Ix.lift(other) * -1

    def __mul__(self, k: int) -> Ix:
        return Ix({v: c * k for v, c in self.terms.items()}, self.const * k)

    __rmul__ = __mul__

    def __int__(self) -> int:
        if self.terms:
            raise ValueError(f"{self} is not constant")
        return self.const

    def __eq__(self, other) -> bool:
        other = Ix.lift(other)
        return self.terms == other.terms and self.const == other.const

    def __hash__(self):
        return hash((tuple(sorted(self.terms.items())), self.const))

    def __str__(self) -> str:
        parts = [v if c == 1 else f"{v}*{c}" for v, c in self.terms.items()]
        if self.const or not parts:
            parts.append(str(self.const))
        return " + ".join(parts).replace("+ -", "- ")

    def __repr__(self) -> str:
        return f"Ix({self})"


@dataclass(frozen=True)
class Loop:
    var: str
    extent: int
    start: int = 0

    def header(self) -> str:
        end = self.start + self.extent
        return f"for ({self.var} = {self.start}; {self.var} < {end}; {self.var}++) {{"


def iterate(loops, env: dict, rolled: bool):
    """Environments for a run of loops, symbolic when ``rolled``."""
    if rolled:
        env = dict(env)
        for loop in loops:
            env[loop.var] = Ix.var(loop.var)
        yield env
        return
    ranges = [range(l.start, l.start + l.extent) for l in loops]
    for combo in itertools.product(*ranges):
        e = dict(env)
        for loop, value in zip(loops, combo):
            e[loop.var] = Ix(const=value)
        yield e
