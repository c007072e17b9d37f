"""Token scoring primitives.

Scores are heuristics over what a cache already holds: attention from the observation
window, local uniformity of each screenshot grid, and redundancy of history against the
current screen. They never modify the cache they judge.

All arithmetic is float64 regardless of the float32 storage.
"""

from dataclasses import dataclass, field
import logging
import math
from typing import Dict, List, Sequence, Tuple, Union

import torch
import torch.nn.functional as F

from stlite.cache import LayerCache, Matrix, TokenMeta
from stlite.config import BudgetConfig

logger = logging.getLogger(__name__)


ZERO_NORM = 1e-12
"""vectors shorter than this have cosine 0 with everything"""

MOORE_OFFSETS = (
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
)


def _as_double(x: Union[Matrix, torch.Tensor]) -> torch.Tensor:
    if isinstance(x, Matrix):
        return x.data.double()
    return torch.as_tensor(x).double()


@dataclass(frozen=True, eq=False)
class AttentionWindow:
    """The queries that vote on token importance, (δ, d) or per head (heads, δ, d)."""

    queries: torch.Tensor
    scale: Union[float, None] = None

    def __post_init__(self):
        queries = _as_double(self.queries)
        if queries.dim() == 2:
            queries = queries[None]
        if queries.dim() != 3 or queries.shape[1] < 1:
            raise ValueError("an attention window needs at least one query")
        object.__setattr__(self, "queries", queries)
        if self.scale is None:
            object.__setattr__(self, "scale", 1.0 / math.sqrt(queries.shape[-1]))
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    @property
    def size(self) -> int:
        return self.queries.shape[1]

    @classmethod
    def for_cache(cls, cache: LayerCache, delta: int) -> "AttentionWindow":
        """The last `delta` query states of `cache`. Caches exported without query
        states use the keys of the last `delta` positions in their place.

        Raises:
            ValueError: if delta exceeds the sequence or the stored queries
        """
        if delta > cache.seq_len:
            raise ValueError(
                f"layer {cache.layer_index}: delta={delta} exceeds L={cache.seq_len}"
            )
        if cache.queries is None:
            logger.debug(
                "layer %d: no stored queries, keys of the last %d positions vote",
                cache.layer_index,
                delta,
            )
            return cls(cache.stacked_keys()[:, -delta:, :])
        stored = cache.queries[0].rows
        if delta > stored:
            raise ValueError(
                f"layer {cache.layer_index}: delta={delta} exceeds the {stored} stored "
                "window queries"
            )
        return cls(torch.stack([q.data for q in cache.queries]).double()[:, -delta:, :])


def _window_softmax(keys, window: AttentionWindow) -> torch.Tensor:
    k = _as_double(keys)
    if k.dim() == 2:
        k = k[None]
    q = window.queries
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(
            f"dimension mismatch: queries have d={q.shape[-1]}, keys d={k.shape[-1]}"
        )
    if q.shape[0] != k.shape[0] and q.shape[0] != 1 and k.shape[0] != 1:
        raise ValueError(
            f"head mismatch: {q.shape[0]} query heads, {k.shape[0]} key heads"
        )
    logits = window.scale * torch.matmul(q, k.transpose(-1, -2))
    return torch.softmax(logits, dim=-1)


def base_attention_prior(keys, window: AttentionWindow) -> torch.Tensor:
    """Attention each token receives, summed over the window's queries and averaged
    over heads. Sums to the window size.

    Args:
        keys (Matrix | torch.Tensor): L x d, or heads x L x d
        window (AttentionWindow): the voting queries

    Returns:
        float64 tensor of length L
    """
    return _window_softmax(keys, window).sum(dim=-2).mean(dim=0)


def window_attention(keys, window: AttentionWindow) -> torch.Tensor:
    """Head-averaged attention rows of the window, δ x L; every row sums to 1."""
    return _window_softmax(keys, window).mean(dim=0)


def pool_prior(a_base: torch.Tensor, pooling: str, kernel_size: int) -> torch.Tensor:
    """Smooth the vote map over neighbouring positions, the way SnapKV clusters it"""
    x = a_base[None, None, :]
    if pooling == "avgpool":
        pooled = F.avg_pool1d(x, kernel_size, stride=1, padding=kernel_size // 2)
    elif pooling == "maxpool":
        pooled = F.max_pool1d(x, kernel_size, stride=1, padding=kernel_size // 2)
    else:
        raise ValueError(f"pooling method '{pooling}' not supported")
    return pooled[0, 0]


def _unit(vectors: torch.Tensor) -> torch.Tensor:
    norms = vectors.norm(dim=-1, keepdim=True)
    return torch.where(
        norms >= ZERO_NORM,
        vectors / norms.clamp_min(ZERO_NORM),
        torch.zeros_like(vectors),
    )


def cosine_matrix(a, b) -> torch.Tensor:
    """Pairwise cosine similarity, M x N. Identical nonzero vectors are exactly 1."""
    a, b = _as_double(a), _as_double(b)
    cos = (_unit(a) @ _unit(b).T).clamp(-1.0, 1.0)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return cos
    # equal rows share an id; memory stays O((M + N) d) plus one M x N mask
    ids = torch.unique(torch.cat([a, b]), dim=0, return_inverse=True)[1]
    id_a, id_b = ids[: a.shape[0]], ids[a.shape[0] :]
    nonzero = a.norm(dim=-1) >= ZERO_NORM
    same = (id_a[:, None] == id_b[None, :]) & nonzero[:, None]
    return cos.masked_fill_(same, 1.0)


def local_uniformity_and_saliency(
    frame_keys: torch.Tensor, present: Union[torch.Tensor, None] = None
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Mean cosine similarity of each grid cell with its Moore neighbours (H), and its
    complement, the spatial saliency Phi = 1 - H.

    Border cells average over the neighbours they have; a cell without neighbours is
    fully uniform.

    Args:
        frame_keys (torch.Tensor): rows x cols x d grid of token vectors
        present (torch.Tensor | None): rows x cols bool mask of cells still cached;
            absent cells are not neighbours and get H = 1

    Returns:
        (H, Phi), each rows x cols float64
    """
    grid = _as_double(frame_keys)
    if grid.dim() != 3 or grid.shape[0] < 1 or grid.shape[1] < 1:
        raise ValueError(f"expected a rows x cols x d grid, got {tuple(grid.shape)}")
    rows, cols, _ = grid.shape
    if present is None:
        present = torch.ones(rows, cols, dtype=torch.bool)
    mask = present.double()

    raw = grid.permute(2, 0, 1)
    unit = _unit(grid).permute(2, 0, 1)
    raw_p = F.pad(raw, (1, 1, 1, 1))
    unit_p = F.pad(unit, (1, 1, 1, 1))
    mask_p = F.pad(mask[None], (1, 1, 1, 1))[0]
    nonzero = raw.norm(dim=0) >= ZERO_NORM

    cosines = []
    count = torch.zeros(rows, cols, dtype=torch.float64)
    for du, dv in MOORE_OFFSETS:
        window = (
            slice(None),
            slice(1 + du, 1 + du + rows),
            slice(1 + dv, 1 + dv + cols),
        )
        c = (unit * unit_p[window]).sum(dim=0).clamp(-1.0, 1.0)
        c = torch.where((raw == raw_p[window]).all(dim=0) & nonzero, 1.0, c)
        m = mask_p[window[1:]] * mask
        cosines.append(c * m)
        count += m
    # sorted so the sum does not depend on neighbour order
    total = torch.stack(cosines).sort(dim=0).values.sum(dim=0)
    uniformity = torch.where(count > 0, total / count.clamp_min(1.0), 1.0)
    return uniformity, 1.0 - uniformity


def trajectory_redundancy(historical, current) -> torch.Tensor:
    """Each historical token's best cosine match in the current frame.

    Raises:
        ValueError: if the current frame is empty or dimensions differ
    """
    historical, current = _as_double(historical), _as_double(current)
    if current.shape[0] < 1:
        raise ValueError("empty current frame")
    if historical.shape[-1] != current.shape[-1]:
        raise ValueError("historical and current vectors differ in dimension")
    if historical.shape[0] == 0:
        return torch.zeros(0, dtype=torch.float64)
    return cosine_matrix(historical, current).max(dim=1).values


def redundancy_threshold(rho: Sequence[float], budget_b: int) -> float:
    """The budget-th smallest redundancy (1-indexed); the largest when the budget
    covers every token."""
    rho = torch.as_tensor(rho, dtype=torch.float64)
    if rho.numel() == 0:
        raise ValueError("redundancy threshold of an empty pool")
    if budget_b < 1:
        raise ValueError(f"budget must be at least 1, got {budget_b}")
    if budget_b >= rho.numel():
        return float(rho.max())
    return float(rho.sort().values[budget_b - 1])


def temporal_gate(
    rho: Sequence[float],
    tau_red: Union[float, None],
    duplicate_cutoff: Union[float, None] = None,
) -> torch.Tensor:
    """Retain (True) tokens at or below the threshold, evict the rest. A None threshold
    retains everything. Tokens at or above `duplicate_cutoff` are evicted regardless.
    """
    rho = torch.as_tensor(rho, dtype=torch.float64)
    if tau_red is None:
        gate = torch.ones_like(rho, dtype=torch.bool)
    else:
        gate = rho <= tau_red
    if duplicate_cutoff is not None:
        gate &= rho < duplicate_cutoff
    return gate


def strict_gate(rho: Sequence[float], budget_b: int) -> torch.Tensor:
    """Admit exactly min(budget_b, M) of the least redundant tokens, ties by index"""
    rho = torch.as_tensor(rho, dtype=torch.float64)
    order = torch.sort(rho, stable=True).indices
    gate = torch.zeros_like(rho, dtype=torch.bool)
    gate[order[:budget_b]] = True
    return gate


def _min_max(x: torch.Tensor) -> torch.Tensor:
    if x.numel() == 0:
        return x
    lo, hi = x.min(), x.max()
    if hi <= lo:
        return torch.zeros_like(x)
    return (x - lo) / (hi - lo)


def integrate_scores(
    a_base: Sequence[float],
    phi: Sequence[float],
    m_time: Sequence[bool],
    meta: Sequence[TokenMeta],
    config: BudgetConfig,
) -> torch.Tensor:
    """Modality-aware final score: text keeps its attention prior, visual tokens add
    spatial saliency and pass through the trajectory gate.

    Raises:
        ValueError: on a length mismatch
    """
    a_base = torch.as_tensor(a_base, dtype=torch.float64)
    phi = torch.as_tensor(phi, dtype=torch.float64)
    m_time = torch.as_tensor(m_time, dtype=torch.bool)
    lengths = {a_base.numel(), phi.numel(), m_time.numel(), len(meta)}
    if len(lengths) != 1:
        raise ValueError(f"score vectors differ in length: {sorted(lengths)}")

    visual = torch.tensor([m.is_visual for m in meta], dtype=torch.bool)
    if not config.enable_css:
        phi = torch.zeros_like(phi)
    if not config.enable_tsg:
        m_time = torch.ones_like(m_time)

    a_visual, phi_visual = a_base[visual], phi[visual]
    if config.normalize_terms:
        a_visual, phi_visual = _min_max(a_visual), _min_max(phi_visual)

    s_final = a_base.clone()
    s_final[visual] = m_time[visual].double() * (a_visual + phi_visual)
    return s_final


@dataclass
class TokenScores:
    """The scoring ledger of one layer. `rho` is NaN where redundancy is undefined
    (text, current frame); `m_time` is True for retained tokens."""

    a_base: torch.Tensor
    phi_space: torch.Tensor
    rho: torch.Tensor
    m_time: torch.Tensor
    s_final: torch.Tensor

    def __post_init__(self):
        lengths = {
            len(self.a_base),
            len(self.phi_space),
            len(self.rho),
            len(self.m_time),
            len(self.s_final),
        }
        if len(lengths) != 1:
            raise ValueError(f"ledger columns differ in length: {sorted(lengths)}")
        if bool((self.a_base < 0).any()):
            raise ValueError("attention prior must be nonnegative")
        if bool(((self.phi_space < 0) | (self.phi_space > 2)).any()):
            raise ValueError("spatial saliency must lie in [0, 2]")
        if bool((self.s_final[~self.m_time] != 0).any()):
            raise ValueError("gated tokens must score 0")

    def __len__(self) -> int:
        return len(self.a_base)

    def quartiles(self) -> Dict[str, Union[List[float], None]]:
        """Min, quartiles and max of every finite column"""
        summary = {}
        probs = torch.tensor([0.0, 0.25, 0.5, 0.75, 1.0], dtype=torch.float64)
        for name in ("a_base", "phi_space", "rho", "s_final"):
            column = getattr(self, name)
            column = column[torch.isfinite(column)]
            if column.numel() == 0:
                summary[name] = None
            else:
                summary[name] = [float(x) for x in torch.quantile(column, probs)]
        return summary

    def to_json(self) -> Dict[str, List]:
        return {
            "a_base": [float(x) for x in self.a_base],
            "phi_space": [float(x) for x in self.phi_space],
            "rho": [None if math.isnan(x) else float(x) for x in self.rho.tolist()],
            "m_time": [int(x) for x in self.m_time],
            "s_final": [float(x) for x in self.s_final],
        }


@dataclass
class TrajectoryStats:
    """Redundancy of the historical visual pool against the current frame"""

    rho: torch.Tensor
    historical_rows: List[int] = field(default_factory=list)
    current_rows: List[int] = field(default_factory=list)


def spatial_saliency(cache: LayerCache, vectors: torch.Tensor) -> torch.Tensor:
    """Phi for every token of `cache`, computed frame by frame; 0 for text"""
    phi = torch.zeros(cache.seq_len, dtype=torch.float64)
    for frame_index, rows in cache.frame_rows().items():
        layout = cache.layout_for(frame_index)
        coords = torch.tensor(
            [cache.meta[i].grid_coord for i in rows], dtype=torch.long
        )
        grid = torch.zeros(
            layout.grid_rows, layout.grid_cols, vectors.shape[-1], dtype=torch.float64
        )
        present = torch.zeros(layout.grid_rows, layout.grid_cols, dtype=torch.bool)
        grid[coords[:, 0], coords[:, 1]] = vectors[rows]
        present[coords[:, 0], coords[:, 1]] = True
        _, saliency = local_uniformity_and_saliency(grid, present)
        phi[rows] = saliency[coords[:, 0], coords[:, 1]]
        logger.debug(
            "layer %d frame %d: %d tokens, mean saliency %.4f",
            cache.layer_index,
            frame_index,
            len(rows),
            float(phi[rows].mean()),
        )
    return phi


def trajectory_stats(cache: LayerCache, vectors: torch.Tensor) -> TrajectoryStats:
    """Redundancy of every historical visual token against the current frame"""
    rho = torch.full((cache.seq_len,), float("nan"), dtype=torch.float64)
    current = cache.current_frame()
    if current is None:
        return TrajectoryStats(rho)
    frames = cache.frame_rows()
    current_rows = frames[current]
    historical_rows = sorted(
        i for frame, rows in frames.items() if frame < current for i in rows
    )
    if historical_rows:
        rho[historical_rows] = trajectory_redundancy(
            vectors[historical_rows], vectors[current_rows]
        )
    return TrajectoryStats(rho, historical_rows, current_rows)
