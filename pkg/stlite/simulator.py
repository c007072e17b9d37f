"""Synthetic GUI trajectories with known structure, and the harness that scores eviction
policies against them.

A trajectory is a run of screenshots over a fixed token grid. Each frame starts as a
copy of the one before; only the cells a component enters or leaves, or that a change
region touches, are regenerated. Copied cells keep their exact vectors, so every token
knows the cell content it came from and the labels below are exact.
"""

from dataclasses import dataclass, field, replace
import json
import logging
from typing import Dict, FrozenSet, List, Sequence, Tuple, Union

import numpy as np
import torch

from stlite.cache import FrameLayout, LayerCache, Matrix, Modality, TokenMeta
from stlite.config import DEFAULT_DELTA, BudgetConfig, PolicyKind
from stlite.costmodel import decode_attention_flops
from stlite.policy import EvictionResult, compress_caches

logger = logging.getLogger(__name__)


Rect = Tuple[int, int, int, int]

QUERY_NOISE = 0.1
"""spread of the synthetic window queries around the current frame's component mean"""


def _rect(value, where: str) -> Rect:
    rect = tuple(int(x) for x in value)
    if len(rect) != 4:
        raise ValueError(f"{where}: a rect is (u0, v0, u1, v1)")
    return rect


@dataclass(frozen=True)
class Component:
    """A screen element occupying the half-open cell rectangle `rect` from frame
    `first_frame` through `last_frame`, inclusive. An empty `vector` is drawn from the
    scenario seed."""

    first_frame: int
    last_frame: int
    rect: Rect
    vector: Tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "rect", _rect(self.rect, "component"))
        object.__setattr__(self, "vector", tuple(float(x) for x in self.vector))

    def active(self, frame_index: int) -> bool:
        return self.first_frame <= frame_index <= self.last_frame

    def contains(self, u: int, v: int) -> bool:
        u0, v0, u1, v1 = self.rect
        return u0 <= u < u1 and v0 <= v < v1


@dataclass(frozen=True)
class ChangeRegion:
    """Cells of `rect` get fresh content at `frame_index`"""

    frame_index: int
    rect: Rect

    def __post_init__(self):
        object.__setattr__(self, "rect", _rect(self.rect, "change region"))

    def contains(self, u: int, v: int) -> bool:
        u0, v0, u1, v1 = self.rect
        return u0 <= u < u1 and v0 <= v < v1


@dataclass(frozen=True)
class StreamScenario:
    """Everything that determines a synthetic trajectory. Generation from the same
    scenario is bit-identical.

    Args:
        num_frames (int): screenshots in the trajectory, the last one is current
        grid_rows (int): token grid height
        grid_cols (int): token grid width
        dim (int): head dimension
        background_vector (Tuple[float, ...]): background content; empty draws one from
            the seed
        components (Tuple[Component, ...]): screen elements
        change_schedule (Tuple[ChangeRegion, ...]): regions that change between frames
        noise_sigma (float): per-entry Gaussian noise added whenever a cell is generated
        seed (int): root of every random draw
        num_heads (int): attention heads per layer
        num_layers (int): layers, identical in structure, independent in noise
        text_tokens (int): text tokens after the last frame
        window_queries (int): stored query states of the last positions
        decode_steps (int): decoding steps assumed by the cost columns
    """

    num_frames: int = 5
    grid_rows: int = 8
    grid_cols: int = 8
    dim: int = 16
    background_vector: Tuple[float, ...] = ()
    components: Tuple[Component, ...] = ()
    change_schedule: Tuple[ChangeRegion, ...] = ()
    noise_sigma: float = 0.01
    seed: int = 0
    num_heads: int = 2
    num_layers: int = 1
    text_tokens: int = 32
    window_queries: int = 32
    decode_steps: int = 1

    def __post_init__(self):
        object.__setattr__(
            self, "background_vector", tuple(float(x) for x in self.background_vector)
        )
        object.__setattr__(self, "components", tuple(self.components))
        object.__setattr__(self, "change_schedule", tuple(self.change_schedule))
        for name in (
            "num_frames",
            "grid_rows",
            "grid_cols",
            "dim",
            "num_heads",
            "num_layers",
            "window_queries",
            "decode_steps",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.text_tokens < 0:
            raise ValueError("text_tokens must be nonnegative")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be nonnegative, got {self.noise_sigma}")
        if self.seed < 0:
            raise ValueError(f"seed must be nonnegative, got {self.seed}")
        if self.background_vector and len(self.background_vector) != self.dim:
            raise ValueError(f"background_vector must have {self.dim} entries")
        if self.window_queries > self.seq_len:
            raise ValueError(
                f"window_queries={self.window_queries} exceeds L={self.seq_len}"
            )
        for n, c in enumerate(self.components):
            self._check_rect(c.rect, f"component {n}")
            if not 0 <= c.first_frame <= c.last_frame < self.num_frames:
                raise ValueError(
                    f"component {n}: frame range [{c.first_frame}, {c.last_frame}] "
                    f"outside [0, {self.num_frames})"
                )
            if c.vector and len(c.vector) != self.dim:
                raise ValueError(f"component {n}: vector must have {self.dim} entries")
        for n, change in enumerate(self.change_schedule):
            self._check_rect(change.rect, f"change {n}")
            if not 0 <= change.frame_index < self.num_frames:
                raise ValueError(
                    f"change {n}: frame {change.frame_index} outside "
                    f"[0, {self.num_frames})"
                )

    def _check_rect(self, rect: Rect, where: str):
        u0, v0, u1, v1 = rect
        if not (0 <= u0 < u1 <= self.grid_rows and 0 <= v0 < v1 <= self.grid_cols):
            raise ValueError(
                f"{where}: rect {rect} out of bounds for a "
                f"{self.grid_rows}x{self.grid_cols} grid"
            )

    @property
    def frame_size(self) -> int:
        return self.grid_rows * self.grid_cols

    @property
    def seq_len(self) -> int:
        return self.num_frames * self.frame_size + self.text_tokens

    def to_json(self) -> Dict:
        return {
            "num_frames": self.num_frames,
            "grid_rows": self.grid_rows,
            "grid_cols": self.grid_cols,
            "dim": self.dim,
            "background_vector": list(self.background_vector),
            "components": [
                {
                    "frames": [c.first_frame, c.last_frame],
                    "rect": list(c.rect),
                    "vector": list(c.vector),
                }
                for c in self.components
            ],
            "change_schedule": [
                {"frame_index": change.frame_index, "rect": list(change.rect)}
                for change in self.change_schedule
            ],
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
            "num_heads": self.num_heads,
            "num_layers": self.num_layers,
            "text_tokens": self.text_tokens,
            "window_queries": self.window_queries,
            "decode_steps": self.decode_steps,
        }

    @classmethod
    def from_json(cls, record: Dict) -> "StreamScenario":
        """Build a scenario from a JSON object; absent fields take their defaults.

        Raises:
            ValueError: on unknown or malformed fields
        """
        if not isinstance(record, dict):
            raise ValueError("scenario: expected an object")
        record = dict(record)
        try:
            components = tuple(
                Component(
                    first_frame=int(c["frames"][0]),
                    last_frame=int(c["frames"][1]),
                    rect=c["rect"],
                    vector=c.get("vector", ()),
                )
                for c in record.pop("components", ())
            )
            changes = tuple(
                ChangeRegion(int(c["frame_index"]), c["rect"])
                for c in record.pop("change_schedule", ())
            )
        except (KeyError, IndexError, TypeError) as e:
            raise ValueError(f"scenario: malformed component or change ({e!r})") from e
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(record) - known)
        if unknown:
            raise ValueError(f"scenario: unknown fields {unknown}")
        return cls(components=components, change_schedule=changes, **record)


def default_scenario(seed: int = 0, **overrides) -> StreamScenario:
    """Five 8x8 screenshots with three components: a persistent header, a panel that
    opens on the third frame and a popup on the last, plus two regions of fresh
    content along the way."""
    scenario = StreamScenario(
        seed=seed,
        components=(
            Component(0, 4, (1, 1, 3, 4)),
            Component(2, 4, (4, 5, 7, 7)),
            Component(4, 4, (5, 1, 7, 3)),
        ),
        change_schedule=(
            ChangeRegion(1, (0, 5, 2, 8)),
            ChangeRegion(3, (3, 0, 5, 3)),
        ),
    )
    return replace(scenario, **overrides) if overrides else scenario


def duplicated_frame_scenario(seed: int = 0, **overrides) -> StreamScenario:
    """Two identical noise-free screenshots: all of history repeats the current view"""
    scenario = StreamScenario(
        num_frames=2,
        seed=seed,
        noise_sigma=0.0,
        components=(Component(0, 1, (2, 2, 4, 4)),),
    )
    return replace(scenario, **overrides) if overrides else scenario


@dataclass(frozen=True)
class GroundTruth:
    """Exact labels, as rows of the generated cache.

    Attributes:
        component_token_indices: current-frame tokens inside an active component
        boundary_token_indices: component tokens with a non-component Moore neighbour
        redundant_token_indices: historical tokens whose content survives unchanged
            into the current frame
    """

    component_token_indices: FrozenSet[int]
    boundary_token_indices: FrozenSet[int]
    redundant_token_indices: FrozenSet[int]
    current_frame_indices: FrozenSet[int] = field(default_factory=frozenset)

    def __post_init__(self):
        for name in (
            "component_token_indices",
            "boundary_token_indices",
            "redundant_token_indices",
            "current_frame_indices",
        ):
            object.__setattr__(self, name, frozenset(getattr(self, name)))
        if not self.boundary_token_indices <= self.component_token_indices:
            raise ValueError("boundary tokens must be component tokens")
        if self.redundant_token_indices & self.current_frame_indices:
            raise ValueError("current-frame tokens cannot be redundant")


def _unit_scale(x: np.ndarray, dim: int) -> np.ndarray:
    return x / np.linalg.norm(x) * np.sqrt(dim)


def _content_vectors(scenario: StreamScenario) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Background and component vectors, drawing any that are not given. Drawn
    component vectors are orthogonal to the background and share its norm."""
    rng = np.random.default_rng(np.random.SeedSequence([scenario.seed, 0]))
    d = scenario.dim
    if scenario.background_vector:
        background = np.asarray(scenario.background_vector, dtype=np.float64)
    else:
        background = _unit_scale(rng.normal(size=d), d)
    vectors = []
    for c in scenario.components:
        if c.vector:
            vectors.append(np.asarray(c.vector, dtype=np.float64))
            continue
        draw = rng.normal(size=d)
        norm2 = float(background @ background)
        if norm2 > 0 and d > 1:
            draw = draw - (draw @ background) / norm2 * background
        vectors.append(_unit_scale(draw, d))
    return background, vectors


def _frame_plan(scenario: StreamScenario):
    """For each frame, the content source of every cell and its lineage id.

    Sources are ("component", n), ("fresh", None) or ("background", None). A cell
    keeps its previous lineage unless it is dirty: its component membership changed
    or a change region covers it this frame.
    """
    plan = []
    previous = None
    next_id = 0
    for f in range(scenario.num_frames):
        frame = {}
        for u in range(scenario.grid_rows):
            for v in range(scenario.grid_cols):
                owner = next(
                    (
                        n
                        for n, c in enumerate(scenario.components)
                        if c.active(f) and c.contains(u, v)
                    ),
                    None,
                )
                changed = any(
                    ch.frame_index == f and ch.contains(u, v)
                    for ch in scenario.change_schedule
                )
                prior = None if previous is None else previous[(u, v)]
                if prior is not None and prior[2] == owner and not changed:
                    frame[(u, v)] = prior
                    continue
                if owner is not None:
                    source = ("component", owner)
                elif changed:
                    source = ("fresh", None)
                else:
                    source = ("background", None)
                frame[(u, v)] = (source, next_id, owner)
                next_id += 1
        plan.append(frame)
        previous = frame
    return plan


def _layer_rng(scenario: StreamScenario, layer: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([scenario.seed, 1, layer]))


def _build_layer(scenario: StreamScenario, plan, layer: int) -> LayerCache:
    rng = _layer_rng(scenario, layer)
    background, component_vectors = _content_vectors(scenario)
    heads, d, sigma = scenario.num_heads, scenario.dim, scenario.noise_sigma
    contents: Dict[int, np.ndarray] = {}

    def generate(source) -> np.ndarray:
        kind, ref = source
        if kind == "component":
            base = component_vectors[ref]
        elif kind == "fresh":
            base = _unit_scale(rng.normal(size=d), d)
        else:
            base = background
        keys = base[None, :] + sigma * rng.normal(size=(heads, d))
        values = rng.normal(size=(heads, d))
        return np.stack([keys, values])

    rows = []
    for frame in plan:
        for u in range(scenario.grid_rows):
            for v in range(scenario.grid_cols):
                source, lineage, _ = frame[(u, v)]
                if lineage not in contents:
                    contents[lineage] = generate(source)
                rows.append(contents[lineage])
    for _ in range(scenario.text_tokens):
        rows.append(rng.normal(size=(2, heads, d)))
    kv = np.stack(rows, axis=2)

    active = [
        component_vectors[n]
        for n, c in enumerate(scenario.components)
        if c.active(scenario.num_frames - 1)
    ]
    if active:
        anchor = np.mean(active, axis=0)
    else:
        anchor = np.mean(
            [kv[0, :, i].mean(axis=0) for i in _frame_rows(scenario, len(plan) - 1)],
            axis=0,
        )
    queries = anchor[None, None, :] + QUERY_NOISE * rng.normal(
        size=(heads, scenario.window_queries, d)
    )

    return LayerCache(
        layer_index=layer,
        keys=tuple(Matrix(torch.from_numpy(kv[0, h])) for h in range(heads)),
        values=tuple(Matrix(torch.from_numpy(kv[1, h])) for h in range(heads)),
        meta=_token_meta(scenario),
        layouts=_layouts(scenario),
        queries=tuple(Matrix(torch.from_numpy(queries[h])) for h in range(heads)),
    )


def _frame_rows(scenario: StreamScenario, frame_index: int) -> range:
    start = frame_index * scenario.frame_size
    return range(start, start + scenario.frame_size)


def _layouts(scenario: StreamScenario) -> List[FrameLayout]:
    return [
        FrameLayout(
            f,
            scenario.grid_rows,
            scenario.grid_cols,
            f * scenario.frame_size,
            (f + 1) * scenario.frame_size,
        )
        for f in range(scenario.num_frames)
    ]


def _token_meta(scenario: StreamScenario) -> List[TokenMeta]:
    meta = [
        TokenMeta(Modality.VISUAL, f, (u, v))
        for f in range(scenario.num_frames)
        for u in range(scenario.grid_rows)
        for v in range(scenario.grid_cols)
    ]
    last = scenario.num_frames - 1
    meta.extend(TokenMeta(Modality.TEXT, last) for _ in range(scenario.text_tokens))
    return meta


def _ground_truth(scenario: StreamScenario, plan) -> GroundTruth:
    last = scenario.num_frames - 1
    current = plan[last]
    offset = last * scenario.frame_size

    def row(f, u, v):
        return f * scenario.frame_size + u * scenario.grid_cols + v

    component_cells = {
        cell for cell, (_, _, owner) in current.items() if owner is not None
    }
    boundary = set()
    for u, v in component_cells:
        for du in (-1, 0, 1):
            for dv in (-1, 0, 1):
                n = (u + du, v + dv)
                if (du, dv) == (0, 0) or n not in current:
                    continue
                if n not in component_cells:
                    boundary.add((u, v))
    surviving = {lineage for _, lineage, _ in current.values()}
    redundant = {
        row(f, u, v)
        for f in range(last)
        for (u, v), (_, lineage, _) in plan[f].items()
        if lineage in surviving
    }
    return GroundTruth(
        component_token_indices={row(last, u, v) for u, v in component_cells},
        boundary_token_indices={row(last, u, v) for u, v in boundary},
        redundant_token_indices=redundant,
        current_frame_indices=set(range(offset, offset + scenario.frame_size)),
    )


def generate_layers(scenario: StreamScenario) -> Tuple[List[LayerCache], GroundTruth]:
    """Every layer of the synthetic trajectory and its labels. Layers share structure
    and labels, and draw independent noise."""
    plan = _frame_plan(scenario)
    caches = [
        _build_layer(scenario, plan, layer) for layer in range(scenario.num_layers)
    ]
    truth = _ground_truth(scenario, plan)
    logger.info(
        "generated %d layer(s) of L=%d: %d component, %d boundary, %d redundant tokens",
        len(caches),
        scenario.seq_len,
        len(truth.component_token_indices),
        len(truth.boundary_token_indices),
        len(truth.redundant_token_indices),
    )
    return caches, truth


def generate_stream(scenario: StreamScenario) -> Tuple[LayerCache, GroundTruth]:
    """The first layer of the synthetic trajectory and its labels"""
    caches, truth = generate_layers(replace(scenario, num_layers=1))
    return caches[0], truth


def retention_metrics(result: EvictionResult, truth: GroundTruth) -> Dict[str, float]:
    """How much of the structure a kept set preserves.

    boundary_recall is 1 when there are no boundary tokens, redundancy_eviction_rate
    is 0 when there is nothing redundant.
    """
    kept = set(result.kept_indices)
    boundary = truth.boundary_token_indices
    redundant = truth.redundant_token_indices
    recall = len(kept & boundary) / len(boundary) if boundary else 1.0
    eviction = len(redundant - kept) / len(redundant) if redundant else 0.0
    return {
        "boundary_recall": recall,
        "redundancy_eviction_rate": eviction,
        "kept_fraction": len(kept) / len(result.scores),
    }


@dataclass(frozen=True)
class ExperimentRow:
    policy: str
    beta: float
    boundary_recall: float
    redundancy_eviction_rate: float
    kept_fraction: float
    flops_ratio: float

    def to_json(self) -> Dict:
        return {
            "policy": self.policy,
            "beta": self.beta,
            "boundary_recall": self.boundary_recall,
            "redundancy_eviction_rate": self.redundancy_eviction_rate,
            "kept_fraction": self.kept_fraction,
            "flops_ratio": self.flops_ratio,
        }

    def to_line(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def _row(
    kind: PolicyKind,
    beta: float,
    results: Sequence[EvictionResult],
    caches: Sequence[LayerCache],
    truth: GroundTruth,
    scenario: StreamScenario,
) -> ExperimentRow:
    metrics = [retention_metrics(r, truth) for r in results]

    def mean(name):
        return float(np.mean([m[name] for m in metrics]))

    full = comp = 0
    for cache, result in zip(caches, results, strict=True):
        args = (scenario.decode_steps, cache.head_dim, cache.num_heads)
        full += decode_attention_flops(cache.seq_len, *args)
        comp += decode_attention_flops(result.budget, *args)
    return ExperimentRow(
        policy=str(kind),
        beta=beta,
        boundary_recall=mean("boundary_recall"),
        redundancy_eviction_rate=mean("redundancy_eviction_rate"),
        kept_fraction=mean("kept_fraction"),
        flops_ratio=full / comp,
    )


def run_experiment(
    scenario: StreamScenario,
    policies: Sequence[Union[PolicyKind, str]],
    betas: Sequence[float],
    base_config: Union[BudgetConfig, None] = None,
    threads: int = 1,
) -> List[ExperimentRow]:
    """One row per (policy, beta), policies outermost, in the order given.

    Args:
        scenario (StreamScenario): the trajectory to compress
        policies (Sequence[PolicyKind]): policies to compare
        betas (Sequence[float]): budget ratios to sweep
        base_config (BudgetConfig | None): every knob but beta; the window defaults to
            the smaller of 32 and the scenario's stored queries
        threads (int): worker threads per compression
    """
    caches, truth = generate_layers(scenario)
    if base_config is None:
        delta = min(DEFAULT_DELTA, scenario.window_queries)
        base_config = BudgetConfig(beta=1.0, delta=delta, seed=scenario.seed)
    rows = []
    for kind in policies:
        kind = PolicyKind(kind)
        for beta in betas:
            config = replace(base_config, beta=beta)
            results = compress_caches(caches, config, kind, threads)
            row = _row(kind, beta, results, caches, truth, scenario)
            logger.info(
                "%s beta=%g: recall %.3f, redundancy evicted %.3f, flops x%.2f",
                kind,
                beta,
                row.boundary_recall,
                row.redundancy_eviction_rate,
                row.flops_ratio,
            )
            rows.append(row)
    return rows


def format_summary(rows: Sequence[ExperimentRow]) -> str:
    """Plain-text table of experiment rows"""
    header = (
        f"{'policy':<18} {'beta':>5} {'recall':>7} {'redund':>7} {'kept':>6} "
        f"{'flops':>6}"
    )
    lines = [header]
    for row in rows:
        lines.append(
            f"{row.policy:<18} {row.beta:>5.2f} {row.boundary_recall:>7.3f} "
            f"{row.redundancy_eviction_rate:>7.3f} {row.kept_fraction:>6.3f} "
            f"{row.flops_ratio:>6.2f}"
        )
    return "\n".join(lines) + "\n"
