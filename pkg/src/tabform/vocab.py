"""Per-column token tables over discretized fields, in one global id space.

Special tokens occupy ids 0..3; each grid column then gets a contiguous id
range at a recorded offset, so a single embedding table and a single
masked-prediction head cover every column while per-column restriction
stays a cheap slice.
"""
from __future__ import annotations

import hashlib
import json

import numpy as np

from .errors import DataError

PAD, MASK, CLS, UNK = 0, 1, 2, 3
SPECIALS = {"[PAD]": PAD, "[MASK]": MASK, "[CLS]": CLS, "[UNK]": UNK}
N_SPECIALS = 4


class Vocabulary:
    """Immutable after build; shared concurrent reads are safe."""

    def __init__(self, column_values: list[tuple[str, list[str]]],
                 frequencies: dict[str, dict[str, int]] | None = None):
        self.column_names = [name for name, _ in column_values]
        self.column_tables: list[dict[str, int]] = []
        self.offsets: list[int] = []
        self.frequencies = frequencies or {}
        next_id = N_SPECIALS
        for _, values in column_values:
            self.offsets.append(next_id)
            table = {}
            for v in values:
                table[v] = next_id
                next_id += 1
            self.column_tables.append(table)
        self.size = next_id
        self._index = {name: c for c, name in enumerate(self.column_names)}
        self._reverse: dict[int, tuple[str, str]] = {}
        for c, table in enumerate(self.column_tables):
            for v, gid in table.items():
                self._reverse[gid] = (self.column_names[c], v)

    def _col(self, c) -> int:
        if isinstance(c, str):
            try:
                return self._index[c]
            except KeyError:
                raise DataError(f"unknown column {c!r}") from None
        return c

    def column_range(self, c) -> tuple[int, int]:
        """Half-open global-id range [lo, hi) of a column (index or name)."""
        c = self._col(c)
        lo = self.offsets[c]
        return lo, lo + len(self.column_tables[c])

    def encode(self, value: str, c) -> int:
        return self.column_tables[self._col(c)].get(value, UNK)

    def decode(self, token_id: int):
        """Return ('special', name) for specials, else (column name, value)."""
        if 0 <= token_id < N_SPECIALS:
            name = next(k for k, v in SPECIALS.items() if v == token_id)
            return ("special", name)
        try:
            return self._reverse[token_id]
        except KeyError:
            raise DataError(f"token id {token_id} outside vocabulary of size {self.size}") from None

    def encode_grid(self, fields: list[list[str]]) -> np.ndarray:
        """Encode an R x C grid of field strings to token ids."""
        C = len(self.column_names)
        if any(len(row) != C for row in fields):
            raise DataError(
                f"grid width mismatch: expected {C} columns, got "
                f"{[len(r) for r in fields]}"
            )
        out = np.empty((len(fields), C), dtype=np.int64)
        for r, row in enumerate(fields):
            for c, v in enumerate(row):
                out[r, c] = self.column_tables[c].get(v, UNK)
        return out

    def decode_grid(self, ids: np.ndarray) -> list[list[str]]:
        out = []
        for row in np.asarray(ids):
            cells = []
            for c, gid in enumerate(row):
                kind, v = self.decode(int(gid))
                cells.append(v if kind == "special" else v)
            out.append(cells)
        return out

    def to_json(self) -> dict:
        return {
            "specials": dict(SPECIALS),
            "columns": [
                {
                    "name": name,
                    "offset": self.offsets[c],
                    "values": _ordered_values(self.column_tables[c]),
                }
                for c, name in enumerate(self.column_names)
            ],
            "size": self.size,
            "frequencies": self.frequencies,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        return cls(
            [(col["name"], col["values"]) for col in obj["columns"]],
            obj.get("frequencies"),
        )

    def content_hash(self) -> str:
        """Stable digest of the id layout, for checkpoint compatibility checks."""
        payload = json.dumps(
            {
                "columns": [
                    {"name": n, "values": _ordered_values(t)}
                    for n, t in zip(self.column_names, self.column_tables)
                ]
            },
            sort_keys=True,
            separators=(",", ":"),
        )
        return hashlib.sha256(payload.encode()).hexdigest()


def _ordered_values(table: dict[str, int]) -> list[str]:
    return [v for v, _ in sorted(table.items(), key=lambda kv: kv[1])]


def build_vocab(train_samples, schema) -> Vocabulary:
    """One table per grid column, from the training split only.

    Values are ordered lexicographically inside each column so the id
    layout is independent of sample order; frequencies are recorded.
    """
    names = [c.name for c in schema.grid_columns()]
    seen: list[dict[str, int]] = [dict() for _ in names]
    for s in train_samples:
        for row in s.fields:
            if len(row) != len(names):
                raise DataError(
                    f"sample for entity {s.entity!r} has {len(row)} fields, "
                    f"schema defines {len(names)} grid columns"
                )
            for c, v in enumerate(row):
                seen[c][v] = seen[c].get(v, 0) + 1
    column_values = [(name, sorted(seen[c])) for c, name in enumerate(names)]
    freqs = {name: dict(sorted(seen[c].items())) for c, name in enumerate(names)}
    return Vocabulary(column_values, freqs)
