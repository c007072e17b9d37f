"""On-disk formats: the STKV cache container and the attention dump.

Both are a directory holding `manifest.json` and one raw blob per matrix. Blobs are
little-endian f32, row-major, with no header. Writes go to a sibling temporary directory
that is renamed into place, so a failed run never leaves a half-written artifact.
"""

from contextlib import contextmanager
import json
import logging
import os
from pathlib import Path
import shutil
import tempfile
from typing import Dict, Iterator, List, Sequence, Union

from stlite.cache import (
    CacheFormatError,
    FrameLayout,
    LayerCache,
    Matrix,
    Modality,
    TokenMeta,
)

logger = logging.getLogger(__name__)


MANIFEST = "manifest.json"
FORMAT_VERSION = 1
KIND_KV = "kv"
KIND_ATTENTION = "attention"

PathLike = Union[str, os.PathLike]


@contextmanager
def atomic_directory(path: PathLike) -> Iterator[Path]:
    """Yield a scratch directory that replaces `path` once the block exits cleanly.

    On an exception the scratch directory is removed and `path` is left untouched.
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    try:
        yield scratch
    except BaseException:
        shutil.rmtree(scratch, ignore_errors=True)
        raise
    if target.exists():
        retired = Path(
            tempfile.mkdtemp(prefix=f".{target.name}.old.", dir=target.parent)
        )
        os.replace(target, retired / target.name)
        os.replace(scratch, target)
        shutil.rmtree(retired, ignore_errors=True)
    else:
        os.replace(scratch, target)


@contextmanager
def atomic_file(path: PathLike, mode: str = "w"):
    """Open a temporary sibling of `path` for writing and rename it over `path` on
    success."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, scratch = tempfile.mkstemp(prefix=f".{target.name}.", dir=target.parent)
    try:
        with os.fdopen(fd, mode) as f:
            yield f
        os.replace(scratch, target)
    except BaseException:
        Path(scratch).unlink(missing_ok=True)
        raise


def write_json(payload, path: PathLike):
    """Deterministic JSON: sorted keys, two-space indent, trailing newline"""
    with atomic_file(path) as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def blob_name(layer_index: int, kind: str, head: Union[int, None] = None) -> str:
    if head is None:
        return f"layer{layer_index:03d}_{kind}.bin"
    return f"layer{layer_index:03d}_head{head:02d}_{kind}.bin"


def _field(record: Dict, name: str, where: str):
    if not isinstance(record, dict):
        raise CacheFormatError(f"{where}: expected an object")
    if name not in record:
        raise CacheFormatError(f"{where}: missing field '{name}'")
    return record[name]


def _list(record: Dict, name: str, where: str) -> List:
    value = _field(record, name, where)
    if not isinstance(value, list):
        raise CacheFormatError(f"{where}: field '{name}' must be a list")
    return value


def _count(record: Dict, name: str, where: str, minimum: int = 0) -> int:
    value = _field(record, name, where)
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise CacheFormatError(
            f"{where}: field '{name}' must be an integer >= {minimum}"
        )
    return value


def _read_manifest(root: Path, expected_kind: str) -> Dict:
    with open(root / MANIFEST) as f:
        try:
            manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise CacheFormatError(f"manifest: not valid JSON ({e})") from e
    version = _field(manifest, "version", "manifest")
    if version != FORMAT_VERSION:
        raise CacheFormatError(f"manifest: unsupported version {version}")
    kind = manifest.get("kind", KIND_KV)
    if kind != expected_kind:
        raise CacheFormatError(f"manifest: kind '{kind}', expected '{expected_kind}'")
    return manifest


def container_kind(path: PathLike) -> str:
    """'kv' or 'attention', read from the manifest of the directory at `path`"""
    with open(Path(path) / MANIFEST) as f:
        try:
            manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise CacheFormatError(f"manifest: not valid JSON ({e})") from e
    return _field(manifest, "kind", "manifest") if "kind" in manifest else KIND_KV


def _read_blob(root: Path, entry: Dict, rows: int, cols: int, where: str) -> Matrix:
    name = _field(entry, "file", where)
    if not isinstance(name, str):
        raise CacheFormatError(f"{where}: field 'file' must be a string")
    declared = _count(entry, "byte_len", where)
    if declared != rows * cols * 4:
        raise CacheFormatError(
            f"{where}: byte_len {declared} != expected {rows * cols * 4}"
        )
    blob = root / name
    if Path(name).name != name:
        raise CacheFormatError(f"{where}: blob name '{name}' must be a bare file name")
    return Matrix.from_bytes(blob.read_bytes(), rows, cols, where)


def _write_blob(root: Path, name: str, matrix: Matrix, head=None, kind=None) -> Dict:
    data = matrix.to_bytes()
    (root / name).write_bytes(data)
    entry = {"file": name, "byte_len": len(data)}
    if kind is not None:
        entry["kind"] = kind
        entry["head"] = head
    return entry


def _meta_to_json(meta: TokenMeta) -> Dict:
    u, v = meta.grid_coord if meta.grid_coord is not None else (None, None)
    return {
        "modality": str(meta.modality),
        "frame_index": meta.frame_index,
        "u": u,
        "v": v,
    }


def _meta_from_json(record: Dict, where: str) -> TokenMeta:
    modality = _field(record, "modality", where)
    if modality not in (Modality.TEXT, Modality.VISUAL):
        raise CacheFormatError(f"{where}: unknown modality '{modality}'")
    frame_index = _count(record, "frame_index", where)
    coord = None
    if modality == Modality.VISUAL:
        coord = (_count(record, "u", where), _count(record, "v", where))
    elif record.get("u") is not None or record.get("v") is not None:
        raise CacheFormatError(f"{where}: text token with a grid coordinate")
    return TokenMeta(Modality(modality), frame_index, coord)


def _layout_from_json(record: Dict, where: str) -> FrameLayout:
    return FrameLayout(
        frame_index=_count(record, "frame_index", where),
        grid_rows=_count(record, "grid_rows", where, 1),
        grid_cols=_count(record, "grid_cols", where, 1),
        span_start=_count(record, "span_start", where),
        span_end=_count(record, "span_end", where),
    )


def _layer_to_json(cache: LayerCache, root: Path) -> Dict:
    blobs = []
    for head in range(cache.num_heads):
        for kind, mats in (
            ("K", cache.keys),
            ("V", cache.values),
            ("Q", cache.queries),
        ):
            if mats is None:
                continue
            name = blob_name(cache.layer_index, kind, head)
            blobs.append(_write_blob(root, name, mats[head], head, kind))
    record = {
        "layer_index": cache.layer_index,
        "num_heads": cache.num_heads,
        "head_dim": cache.head_dim,
        "seq_len": cache.seq_len,
        "token_meta": [_meta_to_json(m) for m in cache.meta],
        "layouts": [
            {
                "frame_index": layout.frame_index,
                "grid_rows": layout.grid_rows,
                "grid_cols": layout.grid_cols,
                "span_start": layout.span_start,
                "span_end": layout.span_end,
            }
            for layout in cache.layouts
        ],
        "blobs": blobs,
    }
    if cache.queries is not None:
        record["window"] = cache.queries[0].rows
    if cache.hidden is not None:
        record["hidden_dim"] = cache.hidden.cols
        name = blob_name(cache.layer_index, "H")
        blobs.append(_write_blob(root, name, cache.hidden, None, "H"))
    if cache.positions is not None:
        record["positions"] = list(cache.positions)
    return record


def _layer_from_json(record: Dict, root: Path, n: int) -> LayerCache:
    where = f"manifest layer {n}"
    layer_index = _count(record, "layer_index", where)
    where = f"layer {layer_index}"
    num_heads = _count(record, "num_heads", where, 1)
    head_dim = _count(record, "head_dim", where, 1)
    seq_len = _count(record, "seq_len", where)
    window = _count(record, "window", where, 1) if "window" in record else None
    hidden_dim = None
    if "hidden_dim" in record:
        hidden_dim = _count(record, "hidden_dim", where, 1)

    found: Dict = {}
    for entry in _list(record, "blobs", where):
        kind = _field(entry, "kind", f"{where} blob")
        head = entry.get("head")
        if kind == "H":
            if hidden_dim is None:
                raise CacheFormatError(f"{where} H: blob present but no hidden_dim")
            found[(kind, None)] = _read_blob(
                root, entry, seq_len, hidden_dim, f"{where} H"
            )
            continue
        if kind not in ("K", "V", "Q"):
            raise CacheFormatError(f"{where}: unknown blob kind '{kind}'")
        if not isinstance(head, int) or not 0 <= head < num_heads:
            raise CacheFormatError(f"{where} {kind}: head {head} out of range")
        rows = seq_len
        if kind == "Q":
            if window is None:
                raise CacheFormatError(f"{where} head {head} Q: no window declared")
            rows = window
        if (kind, head) in found:
            raise CacheFormatError(f"{where} head {head} {kind}: duplicate blob")
        found[(kind, head)] = _read_blob(
            root, entry, rows, head_dim, f"{where} head {head} {kind}"
        )

    def heads(kind):
        missing = [h for h in range(num_heads) if (kind, h) not in found]
        if missing:
            raise CacheFormatError(f"{where} head {missing[0]} {kind}: blob missing")
        return tuple(found[(kind, h)] for h in range(num_heads))

    queries = heads("Q") if window is not None else None
    if hidden_dim is not None and ("H", None) not in found:
        raise CacheFormatError(f"{where} H: blob missing")

    meta = [
        _meta_from_json(m, f"{where} token {i}")
        for i, m in enumerate(_list(record, "token_meta", where))
    ]
    positions = None
    if "positions" in record:
        positions = _list(record, "positions", where)
    layouts = [
        _layout_from_json(entry, f"{where} layout {i}")
        for i, entry in enumerate(_list(record, "layouts", where))
    ]
    try:
        return LayerCache(
            layer_index=layer_index,
            keys=heads("K"),
            values=heads("V"),
            meta=meta,
            layouts=layouts,
            queries=queries,
            hidden=found.get(("H", None)),
            positions=positions,
        )
    except CacheFormatError:
        raise
    except (TypeError, ValueError) as e:
        raise CacheFormatError(f"{where}: {e}") from e


def load_cache(container_path: PathLike) -> List[LayerCache]:
    """Read every layer of the STKV container at `container_path`.

    Raises:
        CacheFormatError: on a malformed manifest, a blob of the wrong length, a
            non-finite entry or an inconsistent layout; the message names the layer
            and field
        OSError: if the container or one of its blobs cannot be read
    """
    root = Path(container_path)
    manifest = _read_manifest(root, KIND_KV)
    layers = _list(manifest, "layers", "manifest")
    declared = _count(manifest, "num_layers", "manifest")
    if declared != len(layers):
        raise CacheFormatError(
            f"manifest: num_layers {declared} but {len(layers)} layer records"
        )
    caches = [_layer_from_json(record, root, n) for n, record in enumerate(layers)]
    logger.info("loaded %d layers from %s", len(caches), root)
    return caches


def save_cache(caches: Sequence[LayerCache], container_path: PathLike):
    """Write `caches` as an STKV container, replacing whatever is at the path.

    Raises:
        OSError: if the path is not writable
    """
    with atomic_directory(container_path) as root:
        layers = [_layer_to_json(cache, root) for cache in caches]
        write_json(
            {
                "version": FORMAT_VERSION,
                "kind": KIND_KV,
                "num_layers": len(layers),
                "layers": layers,
            },
            root / MANIFEST,
        )
    logger.info("saved %d layers to %s", len(caches), container_path)


def load_attention(dump_path: PathLike) -> List[Matrix]:
    """Read a per-layer attention dump: one rows x L matrix per layer."""
    root = Path(dump_path)
    manifest = _read_manifest(root, KIND_ATTENTION)
    matrices = []
    for n, record in enumerate(_list(manifest, "layers", "manifest")):
        layer_index = _count(record, "layer_index", f"manifest layer {n}")
        where = f"layer {layer_index} attention"
        rows = _count(record, "rows", where, 1)
        cols = _count(record, "cols", where, 1)
        matrices.append(_read_blob(root, record, rows, cols, where))
    logger.info("loaded attention for %d layers from %s", len(matrices), root)
    return matrices


def save_attention(attns: Sequence[Matrix], dump_path: PathLike):
    with atomic_directory(dump_path) as root:
        layers = []
        for layer_index, attn in enumerate(attns):
            name = blob_name(layer_index, "A")
            record = _write_blob(root, name, attn)
            record.update(layer_index=layer_index, rows=attn.rows, cols=attn.cols)
            layers.append(record)
        write_json(
            {"version": FORMAT_VERSION, "kind": KIND_ATTENTION, "layers": layers},
            root / MANIFEST,
        )
