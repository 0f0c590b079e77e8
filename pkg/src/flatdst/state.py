"""Symbolic dialogue-state bookkeeping.

A dialogue state assigns every (domain, slot) pair in a fixed schema a
value string; "null" marks an untracked slot and "dontcare" a slot the
user explicitly left open. Turn-level supervision is expressed as one
operation per slot (carryover / delete / dontcare / update), and these
functions convert between consecutive states and operation labels in
both directions.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .errors import ContractError

NULL = "null"
DONTCARE = "dontcare"


def normalize_value(text: str) -> str:
    """Lowercase and collapse runs of whitespace; exact-match canonical form."""
    return " ".join(text.lower().split())


class StateOperation(enum.IntEnum):
    """Per-slot action relating state t-1 to state t. Values double as
    classifier class indices, so the numbering is part of the contract."""

    CARRYOVER = 0
    DELETE = 1
    DONTCARE = 2
    UPDATE = 3


@dataclass(frozen=True)
class Schema:
    """Ordered list of J (domain, slot) pairs.

    `value_lexicon` (per-pair candidate values) exists solely for the
    synthetic data generator; the model never reads it.
    """

    pairs: tuple[tuple[str, str], ...]
    value_lexicon: Mapping[tuple[str, str], tuple[str, ...]] = field(
        default_factory=dict, compare=False, hash=False
    )

    def __post_init__(self):
        if not self.pairs:
            raise ContractError("schema needs at least one (domain, slot) pair")
        if len(set(self.pairs)) != len(self.pairs):
            raise ContractError("schema pairs must be unique")
        for p in self.pairs:
            if len(p) != 2 or not p[0] or not p[1]:
                raise ContractError(f"malformed schema pair {p!r}")
        object.__setattr__(self, "pairs", tuple((str(d), str(s)) for d, s in self.pairs))

    @property
    def size(self) -> int:
        return len(self.pairs)

    @property
    def domains(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for d, _ in self.pairs:
            seen.setdefault(d)
        return tuple(seen)

    def index_of(self, pair: tuple[str, str]) -> int:
        try:
            return self.pairs.index(pair)
        except ValueError:
            raise ContractError(f"{pair!r} is not in the schema") from None

    def to_dict(self) -> dict:
        return {
            "pairs": [[d, s] for d, s in self.pairs],
            "values": {f"{d}-{s}": list(v) for (d, s), v in self.value_lexicon.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        pairs = tuple((p[0], p[1]) for p in d["pairs"])
        lexicon = {}
        for key, vals in d.get("values", {}).items():
            dom, _, slot = key.partition("-")
            lexicon[(dom, slot)] = tuple(vals)
        return cls(pairs, lexicon)


class DialogueState:
    """Immutable value assignment covering every schema pair."""

    __slots__ = ("schema", "_values")

    def __init__(self, schema: Schema, entries: Mapping[tuple[str, str], str] | None = None):
        vals = [NULL] * schema.size
        if entries:
            for pair, value in entries.items():
                vals[schema.index_of(pair)] = normalize_value(value)
        object.__setattr__(self, "schema", schema)
        object.__setattr__(self, "_values", tuple(vals))

    def __setattr__(self, name, value):
        raise AttributeError("DialogueState is immutable")

    @classmethod
    def empty(cls, schema: Schema) -> "DialogueState":
        return cls(schema)

    @classmethod
    def from_values(cls, schema: Schema, values: Iterable[str]) -> "DialogueState":
        vals = tuple(normalize_value(v) for v in values)
        if len(vals) != schema.size:
            raise ContractError(f"expected {schema.size} values, got {len(vals)}")
        out = cls(schema)
        object.__setattr__(out, "_values", vals)
        return out

    @property
    def values(self) -> tuple[str, ...]:
        return self._values

    def value(self, pair: tuple[str, str]) -> str:
        return self._values[self.schema.index_of(pair)]

    def items(self):
        return zip(self.schema.pairs, self._values)

    def tracked(self) -> dict[tuple[str, str], str]:
        """Only the non-null entries, for display and serialization."""
        return {p: v for p, v in self.items() if v != NULL}

    def __eq__(self, other):
        return (isinstance(other, DialogueState)
                and self.schema.pairs == other.schema.pairs
                and self._values == other._values)

    def __hash__(self):
        return hash((self.schema.pairs, self._values))

    def __repr__(self):
        shown = {f"{d}-{s}": v for (d, s), v in self.tracked().items()}
        return f"DialogueState({shown})"


@dataclass(frozen=True)
class DialogueTurn:
    """One exchange: the system prompt (empty on the first turn) and the
    user's reply."""

    system_utterance: str
    user_utterance: str
    turn_index: int

    def __post_init__(self):
        if not self.user_utterance.strip():
            raise ContractError("user utterance must be non-empty")
        if self.turn_index < 1:
            raise ContractError(f"turn_index must be >= 1, got {self.turn_index}")


def apply_operations(
    prev: DialogueState,
    ops: Iterable[StateOperation],
    values: Mapping[int, str],
) -> DialogueState:
    """Produce the next state from per-slot operations.

    `values` must hold a generated string for every UPDATE index and
    nothing else. The input state is never mutated.
    """
    ops = list(ops)
    schema = prev.schema
    if len(ops) != schema.size:
        raise ContractError(f"expected {schema.size} operations, got {len(ops)}")
    update_idx = {i for i, op in enumerate(ops) if op == StateOperation.UPDATE}
    provided = set(values)
    if update_idx - provided:
        missing = sorted(update_idx - provided)
        raise ContractError(f"missing generated value for UPDATE slot(s) {missing}")
    if provided - update_idx:
        extra = sorted(provided - update_idx)
        raise ContractError(f"value provided for non-UPDATE slot(s) {extra}")

    out = list(prev.values)
    for i, op in enumerate(ops):
        if op == StateOperation.CARRYOVER:
            continue
        if op == StateOperation.DELETE:
            out[i] = NULL
        elif op == StateOperation.DONTCARE:
            out[i] = DONTCARE
        else:
            out[i] = normalize_value(values[i])
    return DialogueState.from_values(schema, out)


def derive_gold_operations(
    prev: DialogueState,
    gold: DialogueState,
) -> tuple[list[StateOperation], dict[int, str]]:
    """Label each slot with the operation that turns `prev` into `gold`.

    Unchanged slots are CARRYOVER even when the shared value is null or
    dontcare (keeping label entropy minimal); everything else maps to the
    obvious operation, with UPDATE carrying the gold value as its target.
    Round-trip law: apply_operations(prev, *derive_gold_operations(prev, gold))
    always reconstructs gold.
    """
    if prev.schema.pairs != gold.schema.pairs:
        raise ContractError("states use different schemas")
    ops: list[StateOperation] = []
    targets: dict[int, str] = {}
    for i, (pv, gv) in enumerate(zip(prev.values, gold.values)):
        if pv == gv:
            ops.append(StateOperation.CARRYOVER)
        elif gv == NULL:
            ops.append(StateOperation.DELETE)
        elif gv == DONTCARE:
            ops.append(StateOperation.DONTCARE)
        else:
            ops.append(StateOperation.UPDATE)
            targets[i] = gv
    return ops, targets
