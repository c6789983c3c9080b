"""On-disk formats: GRID1 tensors, SMAP1 saliency maps, dataset manifests.

All binary payloads are little-endian 32-bit floats so files round-trip
bit-exactly across platforms and implementations.

    GRID1: magic "GRID1" | u32 rows | u32 cols | u32 channels | f32 data
    SMAP1: magic "SMAP1" | u32 rows | u32 cols | u8 method
           | u8 fixed_reference | u8 normalized | f32 data
    manifest: UTF-8 JSON tree naming the catalog, image files, the label
           matrix file, and the pair list file
    labels: text, one comma-separated 0/1 row per image, manifest order
    pairs:  text lines "query_id,reference_id,split"
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .core import AttributeCatalog, Dataset, ImageTensor, Method, Pair, SaliencyMap
from .errors import IntegrityError, ParseError

GRID_MAGIC = b"GRID1"
SMAP_MAGIC = b"SMAP1"


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ParseError(f"truncated file while reading {what}")
    return buf


def save_grid(path: str | Path, data: np.ndarray) -> None:
    """Write an (R, C) or (R, C, CH) float array as a GRID1 file."""
    arr = np.asarray(data, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ParseError(f"grid payload must be rank 2 or 3, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<III", *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())


def load_grid(path: str | Path) -> np.ndarray:
    """Read a GRID1 file as an (R, C, CH) float32 array."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 5, "magic") != GRID_MAGIC:
            raise ParseError(f"{path}: bad magic, expected GRID1")
        rows, cols, ch = struct.unpack("<III", _read_exact(fh, 12, "dims"))
        if min(rows, cols, ch) < 1:
            raise ParseError(f"{path}: dims field has zero entry ({rows}, {cols}, {ch})")
        payload = _read_exact(fh, rows * cols * ch * 4, "data")
        if fh.read(1):
            raise ParseError(f"{path}: trailing bytes after data")
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols, ch).copy()


def save_image(path: str | Path, image: ImageTensor) -> None:
    save_grid(path, image.data)


def load_image(path: str | Path) -> ImageTensor:
    return ImageTensor(load_grid(path))


def save_saliency(path: str | Path, smap: SaliencyMap) -> None:
    arr = np.asarray(smap.data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(SMAP_MAGIC)
        fh.write(struct.pack("<II", *arr.shape))
        fh.write(struct.pack("<BBB", int(smap.method), int(smap.fixed_reference), int(smap.normalized)))
        fh.write(np.ascontiguousarray(arr).tobytes())


def load_saliency(path: str | Path) -> SaliencyMap:
    with open(path, "rb") as fh:
        if _read_exact(fh, 5, "magic") != SMAP_MAGIC:
            raise ParseError(f"{path}: bad magic, expected SMAP1")
        rows, cols = struct.unpack("<II", _read_exact(fh, 8, "dims"))
        if min(rows, cols) < 1:
            raise ParseError(f"{path}: dims field has zero entry ({rows}, {cols})")
        method_b, fixed_b, norm_b = struct.unpack("<BBB", _read_exact(fh, 3, "flags"))
        try:
            method = Method(method_b)
        except ValueError:
            raise ParseError(f"{path}: unknown method byte {method_b}") from None
        payload = _read_exact(fh, rows * cols * 4, "data")
        if fh.read(1):
            raise ParseError(f"{path}: trailing bytes after data")
    data = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).copy()
    return SaliencyMap(data, method=method, fixed_reference=bool(fixed_b), normalized=bool(norm_b))


def write_pgm(path: str | Path, grid: np.ndarray) -> None:
    """8-bit text portable graymap preview of a [0, 1] grid."""
    g = np.clip(np.asarray(grid, dtype=np.float64), 0.0, 1.0)
    q = np.rint(g * 255).astype(np.uint8)
    lines = [f"P2", f"{q.shape[1]} {q.shape[0]}", "255"]
    lines += [" ".join(str(v) for v in row) for row in q]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Dataset manifest
# ---------------------------------------------------------------------------

_MANIFEST_KEYS = {"catalog", "images", "labels", "pairs", "meta"}


def _require(tree: dict, key: str, path) -> object:
    if key not in tree:
        raise ParseError(f"{path}: manifest missing required field '{key}'")
    return tree[key]


def load_dataset(manifest_path: str | Path) -> Dataset:
    """Load a dataset described by a JSON manifest.

    Accepts either the manifest file or a dataset directory containing
    ``manifest.json``. Paths inside the manifest are resolved relative to
    the manifest file.
    """
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    try:
        tree = json.loads(manifest_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ParseError(f"manifest file missing: {manifest_path}") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"{manifest_path}: not valid JSON: {exc}") from exc
    if not isinstance(tree, dict):
        raise ParseError(f"{manifest_path}: manifest root must be an object")
    unknown = set(tree) - _MANIFEST_KEYS
    if unknown:
        raise ParseError(f"{manifest_path}: unknown manifest field(s): {', '.join(sorted(unknown))}")

    catalog = AttributeCatalog(tuple(_require(tree, "catalog", manifest_path)))
    base = manifest_path.parent

    entries = _require(tree, "images", manifest_path)
    images = []
    for k, entry in enumerate(entries):
        if not isinstance(entry, dict) or "id" not in entry or "path" not in entry:
            raise ParseError(f"{manifest_path}: images[{k}] must carry 'id' and 'path'")
        img_path = base / entry["path"]
        if not img_path.exists():
            raise IntegrityError(f"{manifest_path}: image file missing for id {entry['id']}: {img_path}")
        images.append((str(entry["id"]), load_image(img_path)))

    labels_path = base / _require(tree, "labels", manifest_path)
    labels = _load_label_matrix(labels_path, n_rows=len(images), n_cols=len(catalog))

    pairs_path = base / _require(tree, "pairs", manifest_path)
    pairs = _load_pairs(pairs_path)

    meta = tree.get("meta", {})
    return Dataset(images=tuple(images), labels=labels, pairs=pairs, catalog=catalog, meta=meta)


def _load_label_matrix(path: Path, n_rows: int, n_cols: int) -> np.ndarray:
    if not path.exists():
        raise ParseError(f"label matrix file missing: {path}")
    rows = []
    for ln, line in enumerate(path.read_text(encoding="utf-8").splitlines()):
        line = line.strip()
        if not line:
            continue
        cells = line.split(",")
        if len(cells) != n_cols:
            raise ParseError(f"{path}:{ln + 1}: expected {n_cols} label columns, got {len(cells)}")
        try:
            row = [int(c) for c in cells]
        except ValueError:
            raise ParseError(f"{path}:{ln + 1}: labels must be integers 0/1") from None
        if any(v not in (0, 1) for v in row):
            raise ParseError(f"{path}:{ln + 1}: labels must be 0 or 1")
        rows.append(row)
    if len(rows) != n_rows:
        raise ParseError(f"{path}: expected {n_rows} label rows, got {len(rows)}")
    return np.asarray(rows, dtype=np.int8)


def _load_pairs(path: Path) -> tuple[Pair, ...]:
    if not path.exists():
        raise ParseError(f"pair list file missing: {path}")
    pairs = []
    for ln, line in enumerate(path.read_text(encoding="utf-8").splitlines()):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise ParseError(f"{path}:{ln + 1}: expected 'query_id,reference_id,split'")
        pairs.append(Pair(parts[0], parts[1], parts[2]))
    return tuple(pairs)


def save_dataset(dataset: Dataset, out_dir: str | Path) -> Path:
    """Write a dataset as manifest + GRID1 images + labels + pairs.

    Output is byte-deterministic for a given dataset. Returns the
    manifest path.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for img_id, img in dataset.images:
        rel = f"images/{img_id}.grid"
        save_image(out / rel, img)
        entries.append({"id": img_id, "path": rel})

    label_lines = [",".join(str(int(v)) for v in row) for row in dataset.labels]
    (out / "labels.txt").write_text("\n".join(label_lines) + "\n", encoding="utf-8")

    pair_lines = [f"{p.query_id},{p.reference_id},{p.split}" for p in dataset.pairs]
    (out / "pairs.txt").write_text("\n".join(pair_lines) + "\n", encoding="utf-8")

    manifest = {
        "catalog": list(dataset.catalog.names),
        "images": entries,
        "labels": "labels.txt",
        "pairs": "pairs.txt",
        "meta": dataset.meta,
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest_path


def dump_json(path: str | Path, payload: dict) -> None:
    """Deterministic JSON writer used for every report/config echo."""
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
