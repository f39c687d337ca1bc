"""Multimodal token stream: ordered role segments with hidden states and positions."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np


class Role(Enum):
    SYSTEM = "system"
    VISUAL = "visual"
    SUPERRES = "superres"
    TEXT = "text"
    GENERATED = "generated"


_ROLE_ORDER = [Role.SYSTEM, Role.VISUAL, Role.SUPERRES, Role.TEXT, Role.GENERATED]


class SequenceError(ValueError):
    """A token sequence violated its structural invariants."""


@dataclass
class Segment:
    role: Role
    hidden: np.ndarray  # (n_tokens, d)

    @property
    def length(self) -> int:
        return self.hidden.shape[0]


@dataclass
class TokenSequence:
    """Ordered segments [System, Visual, (SuperRes)?, Text, Generated*].

    `positions` holds one nonnegative id per token, strictly increasing in
    sequence order. The attention mask is always causal over the current order.
    """

    segments: list[Segment]
    positions: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.positions is None:
            self.positions = np.arange(self.length, dtype=np.int64)
        self.validate()

    # -- structure ---------------------------------------------------------

    def validate(self) -> None:
        order = [s.role for s in self.segments]
        ranks = [_ROLE_ORDER.index(r) for r in order]
        if any(b < a for a, b in zip(ranks, ranks[1:])):
            raise SequenceError(f"segment roles out of order: {[r.value for r in order]}")
        for role in (Role.SYSTEM, Role.VISUAL, Role.SUPERRES, Role.TEXT):
            if order.count(role) > 1:
                raise SequenceError(f"duplicate {role.value} segment")
        if self.positions.shape != (self.length,):
            raise SequenceError("positions length does not match token count")
        if self.length > 1 and not np.all(np.diff(self.positions) > 0):
            raise SequenceError("position ids must strictly increase")
        if np.any(self.positions < 0):
            raise SequenceError("position ids must be nonnegative")

    @property
    def length(self) -> int:
        return sum(s.length for s in self.segments)

    @property
    def hidden(self) -> np.ndarray:
        return np.concatenate([s.hidden for s in self.segments], axis=0)

    def roles(self) -> list[Role]:
        out: list[Role] = []
        for s in self.segments:
            out.extend([s.role] * s.length)
        return out

    def segment(self, role: Role) -> Segment | None:
        for s in self.segments:
            if s.role == role:
                return s
        return None

    def slices(self) -> dict[Role, slice]:
        out: dict[Role, slice] = {}
        start = 0
        for s in self.segments:
            out[s.role] = slice(start, start + s.length)
            start += s.length
        return out

    def attention_mask(self) -> np.ndarray:
        """Causal lower-triangular boolean mask (True = may attend)."""
        n = self.length
        return np.tril(np.ones((n, n), dtype=bool))

    # -- rebuild helpers ---------------------------------------------------

    def with_hidden(self, hidden: np.ndarray) -> "TokenSequence":
        """Same segmentation and positions, new hidden states."""
        if hidden.shape[0] != self.length:
            raise SequenceError("with_hidden: token count mismatch")
        segs = []
        start = 0
        for s in self.segments:
            segs.append(Segment(s.role, hidden[start : start + s.length]))
            start += s.length
        return TokenSequence(segs, self.positions.copy())

    def with_segments(self, segments: list[Segment]) -> "TokenSequence":
        """New segment layout with contiguous position renumbering 0..len-1."""
        return TokenSequence(segments)

    def copy(self) -> "TokenSequence":
        return TokenSequence(
            [Segment(s.role, s.hidden.copy()) for s in self.segments], self.positions.copy()
        )


def renumber_positions(seq: TokenSequence) -> TokenSequence:
    """Contiguous 0..len-1 renumbering in segment order."""
    return replace(seq, positions=np.arange(seq.length, dtype=np.int64))
