"""Per-epoch training metrics: one self-describing key=value line per epoch.

The writer appends and flushes after every record, so an interrupted run
still leaves a parseable file; the reader drops an unterminated final
fragment and validates the rest strictly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

FIELD_NAMES = ("epoch", "p", "l_track", "l_pred", "l_feat", "l_total",
               "acc", "off_err", "wall_s")


@dataclass(frozen=True)
class MetricsRecord:
    epoch: int
    p: float
    l_track: float
    l_pred: float
    l_feat: float
    l_total: float
    acc: float
    off_err: float
    wall_s: float

    def __post_init__(self):
        for name in ("l_track", "l_pred", "l_feat", "l_total"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"metrics record: {name} is not finite")

    def to_line(self) -> str:
        parts = [f"epoch={self.epoch}"]
        parts += [f"{name}={getattr(self, name):.6f}" for name in FIELD_NAMES[1:]]
        return " ".join(parts)

    @classmethod
    def from_line(cls, line: str) -> "MetricsRecord":
        pairs = {}
        for token in line.split():
            key, sep, value = token.partition("=")
            if not sep:
                raise ValueError(f"malformed token {token!r}")
            pairs[key] = value
        missing = [n for n in FIELD_NAMES if n not in pairs]
        if missing:
            raise ValueError(f"missing fields {missing}")
        unknown = [k for k in pairs if k not in FIELD_NAMES]
        if unknown:
            raise ValueError(f"unknown fields {unknown}")
        kw = {name: (int(pairs[name]) if name == "epoch" else float(pairs[name]))
              for name in FIELD_NAMES}
        return cls(**kw)


class MetricsWriter:
    """Append-and-flush writer; one line per record."""

    def __init__(self, path: str):
        self.path = path
        self._f = open(path, "w", encoding="utf-8")

    def write(self, record: MetricsRecord):
        self._f.write(record.to_line() + "\n")
        self._f.flush()

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def read_metrics(path: str) -> list[MetricsRecord]:
    """Parse a metrics file; an unterminated trailing fragment is ignored."""
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    lines = text.split("\n")
    if lines and lines[-1] != "":
        lines = lines[:-1]  # crash fragment without a newline
    records = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            records.append(MetricsRecord.from_line(line))
        except ValueError as e:
            raise ValueError(f"{path}:{lineno}: {e}") from e
    for prev, cur in zip(records, records[1:]):
        if cur.epoch <= prev.epoch:
            raise ValueError(f"{path}: epochs not increasing "
                             f"({prev.epoch} then {cur.epoch})")
    return records
