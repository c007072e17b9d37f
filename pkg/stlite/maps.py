"""Retention maps: one binary PGM per frame, kept tokens white and evicted tokens
black, one pixel per grid cell."""

import logging
import os
from pathlib import Path
from typing import List, Union

import numpy as np

from stlite.cache import FrameLayout, LayerCache
from stlite.container import atomic_file
from stlite.policy import EvictionResult

logger = logging.getLogger(__name__)


KEPT = 255
EVICTED = 0


def retention_grid(result: EvictionResult, layout: FrameLayout) -> np.ndarray:
    """grid_rows x grid_cols uint8 array of the frame's kept cells

    Raises:
        ValueError: if the frame lies outside the sequence the result was computed on
    """
    if result.extent is not None and layout.span_end > result.extent:
        raise ValueError(
            f"layer {result.layer_index} frame {layout.frame_index}: span "
            f"[{layout.span_start}, {layout.span_end}) beyond the compressed sequence "
            f"of {result.extent} positions"
        )
    grid = np.full((layout.grid_rows, layout.grid_cols), EVICTED, dtype=np.uint8)
    for position in result.kept_positions:
        if layout.covers(position):
            grid[layout.coord(position)] = KEPT
    return grid


def encode_pgm(grid: np.ndarray) -> bytes:
    """Binary greymap: P5 header, width then height, maxval 255"""
    rows, cols = grid.shape
    return b"P5\n%d %d\n255\n" % (cols, rows) + grid.astype(np.uint8).tobytes()


def emit_retention_map(
    result: EvictionResult, layout: FrameLayout, path: Union[str, os.PathLike]
) -> Path:
    """Write the retention map of one frame to `path`"""
    grid = retention_grid(result, layout)
    with atomic_file(path, "wb") as f:
        f.write(encode_pgm(grid))
    logger.debug(
        "layer %d frame %d: %d/%d cells kept",
        result.layer_index,
        layout.frame_index,
        int((grid == KEPT).sum()),
        grid.size,
    )
    return Path(path)


def map_name(layer_index: int, frame_index: int) -> str:
    return f"layer{layer_index:03d}_frame{frame_index:03d}.pgm"


def emit_retention_maps(
    result: EvictionResult, cache: LayerCache, directory: Union[str, os.PathLike]
) -> List[Path]:
    """One map per frame layout of `cache`, named by layer and frame"""
    directory = Path(directory)
    return [
        emit_retention_map(
            result, layout, directory / map_name(cache.layer_index, layout.frame_index)
        )
        for layout in cache.layouts
    ]
