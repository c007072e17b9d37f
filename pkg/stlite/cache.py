"""The in-memory cache model: matrices, token metadata, frame layouts and the per-layer
container that every policy compresses.

All types are frozen after construction and validate their invariants up front, so a
LayerCache that exists is a LayerCache that can be scored.
"""

from bisect import bisect_right
from dataclasses import dataclass
from enum import StrEnum
import logging
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import torch

logger = logging.getLogger(__name__)


class CacheFormatError(ValueError):
    """A cache or container failed validation. Messages lead with the location of the
    offending layer, head or field."""


class Modality(StrEnum):
    TEXT = "text"
    VISUAL = "visual"


@dataclass(frozen=True, eq=False)
class Matrix:
    """A finite row-major float32 matrix.

    Args:
        data (torch.Tensor): a 2-D tensor, converted to contiguous float32
    """

    data: torch.Tensor

    def __post_init__(self):
        data = torch.as_tensor(self.data)
        if data.dim() != 2:
            raise ValueError(f"matrix must be 2-D, got shape {tuple(data.shape)}")
        data = data.to(torch.float32).contiguous()
        bad = torch.nonzero(~torch.isfinite(data.flatten()))
        if bad.numel() > 0:
            raise CacheFormatError(f"non-finite value at offset {int(bad[0, 0])}")
        object.__setattr__(self, "data", data)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Matrix):
            return NotImplemented
        if self.data.shape != other.data.shape:
            return False
        return self.to_bytes() == other.to_bytes()

    __hash__ = None

    def __repr__(self):
        return f"{type(self).__name__}({self.rows}x{self.cols})"

    def to_bytes(self) -> bytes:
        """Little-endian f32, row-major."""
        return self.data.numpy().astype("<f4", copy=False).tobytes()

    @classmethod
    def from_bytes(
        cls, buffer: bytes, rows: int, cols: int, where: str = "matrix"
    ) -> "Matrix":
        """Decode a little-endian f32 blob.

        Args:
            buffer (bytes): exactly rows * cols * 4 bytes
            rows (int): row count
            cols (int): column count
            where (str): location prefix for error messages

        Raises:
            CacheFormatError: on a length mismatch or a non-finite entry
        """
        expected = rows * cols * 4
        if len(buffer) != expected:
            raise CacheFormatError(
                f"{where}: blob length {len(buffer)} != expected {expected}"
            )
        flat = np.frombuffer(buffer, dtype="<f4").astype(np.float32)
        bad = np.flatnonzero(~np.isfinite(flat))
        if bad.size > 0:
            raise CacheFormatError(f"{where}: non-finite value at offset {bad[0]}")
        return cls(torch.from_numpy(flat.reshape(rows, cols)))

    def select(self, indices: Sequence[int]) -> "Matrix":
        return Matrix(self.data[torch.as_tensor(list(indices), dtype=torch.long)])


@dataclass(frozen=True)
class TokenMeta:
    """Per-token metadata. Visual tokens carry their (row, col) grid coordinate, text
    tokens never do."""

    modality: Modality
    frame_index: int
    grid_coord: Union[Tuple[int, int], None] = None

    def __post_init__(self):
        object.__setattr__(self, "modality", Modality(self.modality))
        if self.frame_index < 0:
            raise ValueError(f"frame_index must be nonnegative, got {self.frame_index}")
        if self.modality == Modality.VISUAL:
            if self.grid_coord is None:
                raise ValueError("visual tokens must carry a grid coordinate")
            object.__setattr__(self, "grid_coord", tuple(self.grid_coord))
        elif self.grid_coord is not None:
            raise ValueError("text tokens must not carry a grid coordinate")

    @property
    def is_visual(self) -> bool:
        return self.modality == Modality.VISUAL


@dataclass(frozen=True)
class FrameLayout:
    """One screenshot's token grid, linearised row-major over the half-open position
    span [span_start, span_end)."""

    frame_index: int
    grid_rows: int
    grid_cols: int
    span_start: int
    span_end: int

    def __post_init__(self):
        if self.grid_rows < 1 or self.grid_cols < 1:
            raise ValueError(
                f"frame {self.frame_index}: empty grid "
                f"{self.grid_rows}x{self.grid_cols}"
            )
        if self.span_start < 0 or self.span_end - self.span_start != self.size:
            raise CacheFormatError(
                f"frame {self.frame_index}: span/grid mismatch, span "
                f"[{self.span_start}, {self.span_end}) for grid "
                f"{self.grid_rows}x{self.grid_cols}"
            )

    @property
    def size(self) -> int:
        return self.grid_rows * self.grid_cols

    def covers(self, position: int) -> bool:
        return self.span_start <= position < self.span_end

    def coord(self, position: int) -> Tuple[int, int]:
        offset = position - self.span_start
        return divmod(offset, self.grid_cols)

    def position(self, u: int, v: int) -> int:
        return self.span_start + u * self.grid_cols + v


@dataclass(frozen=True, eq=False)
class LayerCache:
    """Keys and values of one transformer layer plus the token metadata the policies
    need.

    Args:
        layer_index (int): position of the layer in the model
        keys (Sequence[Matrix]): one L x d matrix per head
        values (Sequence[Matrix]): one L x d matrix per head
        meta (Sequence[TokenMeta]): one entry per cached token
        layouts (Sequence[FrameLayout]): frame grids, in original sequence positions
        queries (Sequence[Matrix] | None): optional per-head W x d query states of the
            last W positions, used as the observation window
        hidden (Matrix | None): optional L x D hidden states
        positions (Sequence[int] | None): original sequence position of each row, for
            caches that have already been compressed; None means row == position
    """

    layer_index: int
    keys: Tuple[Matrix, ...]
    values: Tuple[Matrix, ...]
    meta: Tuple[TokenMeta, ...]
    layouts: Tuple[FrameLayout, ...] = ()
    queries: Union[Tuple[Matrix, ...], None] = None
    hidden: Union[Matrix, None] = None
    positions: Union[Tuple[int, ...], None] = None

    def __post_init__(self):
        for name in ("keys", "values", "meta", "layouts"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.queries is not None:
            object.__setattr__(self, "queries", tuple(self.queries))
        if self.positions is not None:
            object.__setattr__(self, "positions", tuple(int(p) for p in self.positions))
        self._validate()

    def _validate(self):
        where = f"layer {self.layer_index}"
        if len(self.keys) == 0:
            raise CacheFormatError(f"{where}: no heads")
        if len(self.values) != len(self.keys):
            raise CacheFormatError(
                f"{where}: {len(self.keys)} key heads but "
                f"{len(self.values)} value heads"
            )
        seq_len, head_dim = self.keys[0].rows, self.keys[0].cols
        for kind, mats in (("K", self.keys), ("V", self.values)):
            for head, m in enumerate(mats):
                if (m.rows, m.cols) != (seq_len, head_dim):
                    raise CacheFormatError(
                        f"{where} head {head} {kind}: shape {m.rows}x{m.cols}, "
                        f"expected {seq_len}x{head_dim}"
                    )
        if self.queries is not None:
            if len(self.queries) != len(self.keys):
                raise CacheFormatError(f"{where} Q: one query matrix per head required")
            window = self.queries[0].rows
            for head, q in enumerate(self.queries):
                if q.cols != head_dim or q.rows != window or window < 1:
                    raise CacheFormatError(
                        f"{where} head {head} Q: shape {q.rows}x{q.cols} inconsistent"
                    )
        if self.hidden is not None and self.hidden.rows != seq_len:
            raise CacheFormatError(
                f"{where} H: {self.hidden.rows} rows, expected {seq_len}"
            )
        if len(self.meta) != seq_len:
            raise CacheFormatError(
                f"{where} token_meta: {len(self.meta)} entries, expected {seq_len}"
            )
        if self.positions is not None:
            if len(self.positions) != seq_len:
                raise CacheFormatError(
                    f"{where} positions: {len(self.positions)} entries, "
                    f"expected {seq_len}"
                )
            if any(p < 0 for p in self.positions) or any(
                b <= a for a, b in zip(self.positions, self.positions[1:])
            ):
                raise CacheFormatError(
                    f"{where} positions: must be strictly increasing"
                )

        previous = None
        for n, layout in enumerate(self.layouts):
            if previous is not None and (
                layout.frame_index <= previous.frame_index
                or layout.span_start < previous.span_end
            ):
                raise CacheFormatError(
                    f"{where} layout {n}: spans must be disjoint and ordered by frame"
                )
            if self.positions is None and layout.span_end > seq_len:
                raise CacheFormatError(
                    f"{where} layout {n}: span end {layout.span_end} beyond L={seq_len}"
                )
            previous = layout

        starts = [layout.span_start for layout in self.layouts]
        for i, m in enumerate(self.meta):
            position = self.position(i)
            n = bisect_right(starts, position) - 1
            layout = self.layouts[n] if n >= 0 else None
            if layout is not None and not layout.covers(position):
                layout = None
            if layout is None:
                if m.is_visual:
                    raise CacheFormatError(
                        f"{where} token {i}: visual token outside every frame span"
                    )
                continue
            if not m.is_visual:
                raise CacheFormatError(
                    f"{where} token {i}: text token inside the span of frame "
                    f"{layout.frame_index}"
                )
            if m.frame_index != layout.frame_index:
                raise CacheFormatError(
                    f"{where} token {i}: frame_index {m.frame_index} but span belongs "
                    f"to frame {layout.frame_index}"
                )
            if m.grid_coord != layout.coord(position):
                raise CacheFormatError(
                    f"{where} token {i}: grid coordinate {m.grid_coord} != "
                    f"{layout.coord(position)} for its span offset"
                )

    def __eq__(self, other) -> bool:
        if not isinstance(other, LayerCache):
            return NotImplemented
        return (
            self.layer_index == other.layer_index
            and self.keys == other.keys
            and self.values == other.values
            and self.meta == other.meta
            and self.layouts == other.layouts
            and self.queries == other.queries
            and self.hidden == other.hidden
            and self.positions == other.positions
        )

    __hash__ = None

    def __repr__(self):
        return (
            f"{type(self).__name__}(layer={self.layer_index}, heads={self.num_heads}, "
            f"L={self.seq_len}, d={self.head_dim}, frames={len(self.layouts)})"
        )

    @property
    def num_heads(self) -> int:
        return len(self.keys)

    @property
    def head_dim(self) -> int:
        return self.keys[0].cols

    @property
    def seq_len(self) -> int:
        return self.keys[0].rows

    def position(self, row: int) -> int:
        """Original sequence position of `row`"""
        if self.positions is None:
            return row
        return self.positions[row]

    def stacked_keys(self) -> torch.Tensor:
        """Keys as a float64 (heads, L, d) tensor"""
        return torch.stack([k.data for k in self.keys]).double()

    def token_vectors(self, source: str = "keys") -> torch.Tensor:
        """One float64 vector per token: the mean key over heads, or the hidden state.

        Args:
            source (str): "keys" or "hidden"
        """
        if source == "keys":
            return self.stacked_keys().mean(dim=0)
        if source == "hidden":
            if self.hidden is None:
                raise ValueError(
                    f"layer {self.layer_index}: hidden states requested but not present"
                )
            return self.hidden.data.double()
        raise ValueError(f"unknown vector source '{source}'")

    def frame_rows(self) -> Dict[int, List[int]]:
        """Map each frame index to the rows of its visual tokens, in row order"""
        frames: Dict[int, List[int]] = {}
        for i, m in enumerate(self.meta):
            if m.is_visual:
                frames.setdefault(m.frame_index, []).append(i)
        return frames

    def current_frame(self) -> Union[int, None]:
        """The most recent frame that still has visual tokens in the cache"""
        frames = [m.frame_index for m in self.meta if m.is_visual]
        return max(frames) if frames else None

    def layout_for(self, frame_index: int) -> FrameLayout:
        for layout in self.layouts:
            if layout.frame_index == frame_index:
                return layout
        raise KeyError(f"layer {self.layer_index}: no layout for frame {frame_index}")

    def select(self, indices: Sequence[int]) -> "LayerCache":
        """Keep only `indices` (ascending), preserving original sequence order and
        recording original positions. Selecting every row returns the cache itself.
        """
        indices = list(indices)
        if indices == list(range(self.seq_len)):
            return self
        return LayerCache(
            layer_index=self.layer_index,
            keys=tuple(k.select(indices) for k in self.keys),
            values=tuple(v.select(indices) for v in self.values),
            meta=tuple(self.meta[i] for i in indices),
            layouts=self.layouts,
            queries=self.queries,
            hidden=self.hidden.select(indices) if self.hidden is not None else None,
            positions=tuple(self.position(i) for i in indices),
        )
