"""Analytic attention cost of decoding over a full versus a compressed cache, and the
arithmetic behind measured latency speedups.

Only the cache-dependent terms are modelled: QK^T scores and the attention-weighted sum
over V. Projections and MLPs cost the same whatever the cache size.
"""

from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
import json
import logging
from pathlib import Path
from typing import Dict, List, Sequence, Union

logger = logging.getLogger(__name__)


BYTES_PER_ELEMENT = 4
SPEEDUP_COLUMNS = ("prefill", "decode", "e2e")
LATENCY_FIELDS = (
    "screenshots",
    "prefill_full",
    "prefill_comp",
    "decode_full",
    "decode_comp",
)


def round2(x: float) -> float:
    """Round half up to two decimals, as latency tables are printed"""
    return float(Decimal(repr(x)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def decode_attention_flops(seq: int, decode_steps: int, head_dim: int, num_heads: int):
    """Attention FLOPs of `decode_steps` decoding steps starting from a cache of `seq`
    tokens, the cache growing by one token per step.

    Each step costs 2*heads*dim*len for QK^T plus the same for AV.
    """
    per_token = 4 * num_heads * head_dim
    return per_token * (decode_steps * seq + decode_steps * (decode_steps - 1) // 2)


def kv_bytes(seq: int, head_dim: int, num_heads: int) -> int:
    """Size of K and V for `seq` tokens at f32"""
    return 2 * num_heads * head_dim * seq * BYTES_PER_ELEMENT


def analytic_cost(
    seq_full: int, seq_comp: int, decode_steps: int, head_dim: int, num_heads: int
) -> Dict[str, Union[int, float]]:
    """Decode-phase attention FLOPs and KV footprint, full versus compressed.

    Raises:
        ValueError: on a nonpositive count or a compressed length above the full one
    """
    counts = {
        "seq_full": seq_full,
        "seq_comp": seq_comp,
        "decode_steps": decode_steps,
        "head_dim": head_dim,
        "num_heads": num_heads,
    }
    for name, value in counts.items():
        if value < 1:
            raise ValueError(f"{name} must be positive, got {value}")
    if seq_comp > seq_full:
        raise ValueError(f"seq_comp={seq_comp} exceeds seq_full={seq_full}")
    full = decode_attention_flops(seq_full, decode_steps, head_dim, num_heads)
    comp = decode_attention_flops(seq_comp, decode_steps, head_dim, num_heads)
    return {
        "decode_flops_full": full,
        "decode_flops_comp": comp,
        "flops_ratio": full / comp,
        "kv_bytes_full": kv_bytes(seq_full, head_dim, num_heads),
        "kv_bytes_comp": kv_bytes(seq_comp, head_dim, num_heads),
    }


@dataclass(frozen=True)
class LatencyEntry:
    """One row of a measured latency table, in milliseconds. `published` optionally
    carries the speedups as printed next to the measurements."""

    screenshots: int
    prefill_full: float
    prefill_comp: float
    decode_full: float
    decode_comp: float
    published: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for name in LATENCY_FIELDS:
            if not getattr(self, name) > 0:
                raise ValueError(
                    f"{self.screenshots} screenshots: {name} must be positive, "
                    f"got {getattr(self, name)}"
                )
        unknown = set(self.published) - set(SPEEDUP_COLUMNS)
        if unknown:
            raise ValueError(f"unknown published speedup columns {sorted(unknown)}")

    @classmethod
    def from_json(cls, record: Dict, where: str = "entry") -> "LatencyEntry":
        """Build an entry from a JSON object, naming any missing field"""
        if not isinstance(record, dict):
            raise ValueError(f"{where}: expected an object")
        for name in LATENCY_FIELDS:
            if name not in record:
                raise ValueError(f"{where}: missing field '{name}'")
        try:
            return cls(
                screenshots=int(record["screenshots"]),
                prefill_full=float(record["prefill_full"]),
                prefill_comp=float(record["prefill_comp"]),
                decode_full=float(record["decode_full"]),
                decode_comp=float(record["decode_comp"]),
                published={k: float(v) for k, v in record.get("published", {}).items()},
            )
        except (TypeError, ValueError) as e:
            raise ValueError(f"{where}: {e}") from e


@dataclass
class SpeedupRow:
    screenshots: int
    prefill_speedup: float
    decode_speedup: float
    e2e_speedup: float
    published: Dict[str, float] = field(default_factory=dict)

    @property
    def computed(self) -> Dict[str, float]:
        return {
            "prefill": self.prefill_speedup,
            "decode": self.decode_speedup,
            "e2e": self.e2e_speedup,
        }

    @property
    def mismatches(self) -> List[str]:
        """Columns whose published value is not the rounded computed value"""
        return [
            column
            for column in SPEEDUP_COLUMNS
            if column in self.published
            and round2(self.published[column]) != round2(self.computed[column])
        ]

    def to_json(self) -> Dict:
        return {
            "screenshots": self.screenshots,
            "prefill_speedup": round2(self.prefill_speedup),
            "decode_speedup": round2(self.decode_speedup),
            "e2e_speedup": round2(self.e2e_speedup),
            "published": self.published,
            "mismatches": self.mismatches,
        }


def speedup_report(entries: Sequence[LatencyEntry]) -> List[SpeedupRow]:
    """Prefill, decode and end-to-end speedup of every entry, unrounded"""
    rows = []
    for entry in entries:
        row = SpeedupRow(
            screenshots=entry.screenshots,
            prefill_speedup=entry.prefill_full / entry.prefill_comp,
            decode_speedup=entry.decode_full / entry.decode_comp,
            e2e_speedup=(entry.prefill_full + entry.decode_full)
            / (entry.prefill_comp + entry.decode_comp),
            published=dict(entry.published),
        )
        for column in row.mismatches:
            logger.warning(
                "%d screenshots: published %s speedup %.2f, components give %.2f",
                entry.screenshots,
                column,
                row.published[column],
                round2(row.computed[column]),
            )
        rows.append(row)
    return rows


def load_latency_table(path: Union[str, Path]) -> List[LatencyEntry]:
    """Read latency entries from a JSON list, or an object with an "entries" list.

    Raises:
        ValueError: on malformed JSON or a bad entry
        OSError: if the file cannot be read
    """
    with open(path) as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}: not valid JSON ({e})") from e
    if isinstance(payload, dict):
        if "entries" not in payload:
            raise ValueError(f"{path}: missing field 'entries'")
        payload = payload["entries"]
    if not isinstance(payload, list):
        raise ValueError(f"{path}: expected a list of latency entries")
    return [
        LatencyEntry.from_json(record, f"entry {n}") for n, record in enumerate(payload)
    ]


def format_speedup_table(rows: Sequence[SpeedupRow]) -> str:
    """Plain-text table, two decimals, with the published values where they differ"""
    lines = [f"{'screenshots':>11}  {'prefill':>7}  {'decode':>7}  {'e2e':>7}  notes"]
    for row in rows:
        notes = ", ".join(
            f"published {column} {row.published[column]:.2f}"
            for column in row.mismatches
        )
        lines.append(
            f"{row.screenshots:>11}  {round2(row.prefill_speedup):>7.2f}  "
            f"{round2(row.decode_speedup):>7.2f}  {round2(row.e2e_speedup):>7.2f}  "
            f"{notes}".rstrip()
        )
    return "\n".join(lines) + "\n"
