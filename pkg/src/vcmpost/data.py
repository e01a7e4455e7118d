"""Sequence and annotation ingestion, dataset manifests, patch pairs,
and the synthetic rectangle generator used for desk-scale runs.

Annotations are per-frame text files in normalized coordinates, one
object per line: ``class_id cx cy w h`` with every value in [0, 1].
Files are named ``<sequence>_<frame>.txt`` with a zero-padded six-digit
frame index. Sequences are Y4M files or directories of numbered PNG
frames with an ``fps.txt`` sidecar. Frame indexing is zero-based
everywhere.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .codec import read_y4m, write_y4m
from .errors import (
    AlignmentError,
    FormatError,
    IngestionError,
    ParseError,
    UsageError,
    ValidationError,
)
from .frames import FRAME_DTYPE, VideoSequence, check_aligned

_FRAME_FILE = re.compile(r"^(?P<stem>.*)_(?P<index>\d{6})\.txt$")


@dataclass(frozen=True)
class GroundTruthObject:
    frame_index: int
    class_id: int
    box: tuple

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ValidationError(f"ground-truth box must have positive area, got {self.box}")
        if self.frame_index < 0 or self.class_id < 0:
            raise ValidationError(
                f"frame_index and class_id must be >= 0, got "
                f"{self.frame_index}, {self.class_id}"
            )


def _parse_annotation_file(path: Path, frame_index: int, width: int, height: int) -> list:
    objects = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        text = line.strip()
        if not text:
            continue
        parts = text.split()
        if len(parts) != 5:
            raise ParseError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
        try:
            class_id = int(parts[0])
            cx, cy, w, h = (float(v) for v in parts[1:])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
        for name, value in (("cx", cx), ("cy", cy), ("w", w), ("h", h)):
            if not 0.0 <= value <= 1.0:
                raise ValidationError(
                    f"{path}:{lineno}: normalized {name}={value:g} lies outside [0, 1]"
                )
        if w <= 0.0 or h <= 0.0:
            raise ValidationError(f"{path}:{lineno}: box must have positive area")
        eps = 1e-9
        if cx - w / 2 < -eps or cx + w / 2 > 1 + eps or cy - h / 2 < -eps or cy + h / 2 > 1 + eps:
            raise ValidationError(f"{path}:{lineno}: box extends outside the frame")
        objects.append(
            GroundTruthObject(
                frame_index=frame_index,
                class_id=class_id,
                box=(
                    (cx - w / 2) * width,
                    (cy - h / 2) * height,
                    (cx + w / 2) * width,
                    (cy + h / 2) * height,
                ),
            )
        )
    return objects


def load_annotations(path, frame_size) -> list:
    """Load ground truth from one annotation file or a directory of them.

    ``frame_size`` is (width, height) in pixels and scales the
    normalized coordinates to pixel corner boxes.
    """
    path = Path(path)
    width, height = frame_size
    if path.is_dir():
        objects = []
        for file in sorted(path.iterdir()):
            m = _FRAME_FILE.match(file.name)
            if not m:
                continue
            objects.extend(
                _parse_annotation_file(file, int(m.group("index")), width, height)
            )
        return objects
    if not path.exists():
        raise IngestionError(f"annotation path does not exist: {path}")
    m = _FRAME_FILE.match(path.name)
    frame_index = int(m.group("index")) if m else 0
    return _parse_annotation_file(path, frame_index, width, height)


def write_annotations(directory, sequence_name: str, per_frame, frame_size) -> list:
    """Write per-frame annotation files; returns the written paths.

    ``per_frame`` maps frame index to a list of GroundTruthObject. Box
    coordinates are emitted normalized with six decimals, so boxes on a
    fine enough grid round-trip exactly.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    width, height = frame_size
    written = []
    for frame_index, objects in sorted(per_frame.items()):
        lines = []
        for obj in objects:
            x0, y0, x1, y1 = obj.box
            cx = (x0 + x1) / 2.0 / width
            cy = (y0 + y1) / 2.0 / height
            w = (x1 - x0) / width
            h = (y1 - y0) / height
            lines.append(f"{obj.class_id} {cx:.6f} {cy:.6f} {w:.6f} {h:.6f}")
        out = directory / f"{sequence_name}_{frame_index:06d}.txt"
        out.write_text("".join(line + "\n" for line in lines))
        written.append(out)
    return written


def group_by_frame(objects, frame_count: int) -> list:
    """Reshape a flat ground-truth list into one list per frame."""
    per_frame = [[] for _ in range(frame_count)]
    for obj in objects:
        if obj.frame_index < frame_count:
            per_frame[obj.frame_index].append(obj)
    return per_frame


# -- sequence loading -------------------------------------------------


def _load_png_dir(path: Path, fps) -> VideoSequence:
    files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise IngestionError(f"{path}: no PNG frames found")
    if fps is None:
        sidecar = path / "fps.txt"
        if not sidecar.exists():
            raise UsageError(f"{path}: fps unknown; provide fps.txt or pass fps explicitly")
        try:
            fps = float(sidecar.read_text().strip())
        except ValueError as exc:
            raise ParseError(f"{sidecar}: not a number") from exc
    frames = []
    shape = None
    for file in files:
        try:
            with Image.open(file) as img:
                arr = np.asarray(img.convert("RGB"), dtype=FRAME_DTYPE) / 255.0
        except (OSError, UnidentifiedImageError) as exc:
            raise IngestionError(f"could not read frame {file}: {exc}") from exc
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise FormatError(
                f"{file}: frame size {arr.shape[:2]} differs from {shape[:2]}"
            )
        frames.append(arr)
    return VideoSequence(np.stack(frames), fps=fps, name=path.name)


def load_sequence(path, fps=None) -> VideoSequence:
    """Load a Y4M file or a PNG directory as a frame sequence in [0, 1].

    For Y4M, dimensions and frame rate come from the stream header and
    override any ``fps`` argument. For PNG directories an explicit
    ``fps`` wins over the ``fps.txt`` sidecar.
    """
    path = Path(path)
    if path.is_dir():
        return _load_png_dir(path, fps)
    if not path.exists():
        raise IngestionError(f"sequence path does not exist: {path}")
    return read_y4m(path)


def save_sequence(path, seq: VideoSequence) -> Path:
    """Write a sequence as Y4M (path ends in .y4m) or as a PNG directory."""
    path = Path(path)
    if path.suffix.lower() == ".y4m":
        return write_y4m(path, seq)
    path.mkdir(parents=True, exist_ok=True)
    for i in range(seq.frame_count):
        img = np.rint(seq.frames[i].astype(np.float64) * 255.0).astype(np.uint8)
        Image.fromarray(img).save(path / f"frame_{i:06d}.png")
    (path / "fps.txt").write_text(f"{seq.fps:g}\n")
    return path


# -- patch pairs ------------------------------------------------------


@dataclass(frozen=True)
class PatchPair:
    """Co-located crops cut from a decoded frame and its raw original."""

    decoded_patch: np.ndarray
    raw_patch: np.ndarray
    sequence: str
    frame_index: int
    x: int
    y: int


def make_patch_pairs(raw_seq: VideoSequence, decoded_seq: VideoSequence,
                     patch_size: int, count: int, seed: int) -> list:
    """Cut ``count`` seeded random co-located square patches."""
    check_aligned(raw_seq, decoded_seq)
    size = int(patch_size)
    if size < 1 or size > min(raw_seq.height, raw_seq.width):
        raise UsageError(
            f"patch_size must lie in [1, {min(raw_seq.height, raw_seq.width)}], got {patch_size}"
        )
    if count < 0:
        raise UsageError(f"count must be >= 0, got {count}")
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(count):
        frame = int(rng.integers(raw_seq.frame_count))
        x = int(rng.integers(raw_seq.width - size + 1))
        y = int(rng.integers(raw_seq.height - size + 1))
        pairs.append(
            PatchPair(
                decoded_patch=decoded_seq.frames[frame, y:y + size, x:x + size].copy(),
                raw_patch=raw_seq.frames[frame, y:y + size, x:x + size].copy(),
                sequence=raw_seq.name,
                frame_index=frame,
                x=x,
                y=y,
            )
        )
    return pairs


# -- manifests --------------------------------------------------------

_ENTRY_KEYS = {"id", "raw", "fps", "frame_count", "preset", "annotations",
               "decoded", "postprocessed"}
_REQUIRED_KEYS = {"id", "raw", "fps", "frame_count"}


@dataclass
class ManifestEntry:
    id: str
    raw: Path
    fps: float
    frame_count: int
    preset: str = "A"
    annotations: Path | None = None
    decoded: dict = field(default_factory=dict)
    postprocessed: dict = field(default_factory=dict)


@dataclass
class SequenceManifest:
    entries: list
    root: Path

    def entry(self, entry_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.id == entry_id:
                return e
        raise UsageError(f"manifest has no entry {entry_id!r}")


def load_manifest(path) -> SequenceManifest:
    """Load and validate a manifest; every problem names its entry."""
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"manifest does not exist: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict) or "entries" not in doc:
        raise ValidationError(f"{path}: manifest must be an object with an 'entries' list")
    root = path.parent
    entries = []
    missing_paths = []
    for i, raw_entry in enumerate(doc["entries"]):
        where = f"{path}: entry {i}"
        if not isinstance(raw_entry, dict):
            raise ValidationError(f"{where}: must be an object")
        unknown = set(raw_entry) - _ENTRY_KEYS
        if unknown:
            raise ValidationError(f"{where}: unknown keys {sorted(unknown)}")
        absent = _REQUIRED_KEYS - set(raw_entry)
        if absent:
            raise ValidationError(f"{where}: missing keys {sorted(absent)}")
        entry = ManifestEntry(
            id=str(raw_entry["id"]),
            raw=root / raw_entry["raw"],
            fps=float(raw_entry["fps"]),
            frame_count=int(raw_entry["frame_count"]),
            preset=str(raw_entry.get("preset", "A")),
            annotations=(root / raw_entry["annotations"])
            if raw_entry.get("annotations") else None,
        )
        if entry.frame_count < 1:
            raise ValidationError(f"{where}: frame_count must be >= 1")
        if not entry.fps > 0:
            raise ValidationError(f"{where}: fps must be positive")
        for qp_text, rec in (raw_entry.get("decoded") or {}).items():
            qp = int(qp_text)
            if isinstance(rec, str):
                rec = {"path": rec, "size_bytes": 0}
            entry.decoded[qp] = {
                "path": root / rec["path"],
                "size_bytes": int(rec.get("size_bytes", 0)),
            }
        for qp_text, rel in (raw_entry.get("postprocessed") or {}).items():
            entry.postprocessed[int(qp_text)] = root / rel
        if not entry.raw.exists():
            missing_paths.append(f"{entry.id}: raw {entry.raw}")
        if entry.annotations is not None and not entry.annotations.exists():
            missing_paths.append(f"{entry.id}: annotations {entry.annotations}")
        for qp, rec in entry.decoded.items():
            if not rec["path"].exists():
                missing_paths.append(f"{entry.id}: decoded qp {qp} {rec['path']}")
        for qp, p in entry.postprocessed.items():
            if not p.exists():
                missing_paths.append(f"{entry.id}: postprocessed qp {qp} {p}")
        entries.append(entry)
    if missing_paths:
        raise IngestionError(
            "manifest references missing paths:\n  " + "\n  ".join(missing_paths)
        )
    return SequenceManifest(entries=entries, root=root)


def save_manifest(path, manifest: SequenceManifest) -> Path:
    """Write a manifest with paths stored relative to the manifest file."""
    path = Path(path)
    root = path.parent.resolve()

    def rel(p: Path) -> str:
        p = Path(p).resolve()
        try:
            return p.relative_to(root).as_posix()
        except ValueError:
            return str(p)

    doc = {"entries": []}
    for e in manifest.entries:
        item = {
            "id": e.id,
            "raw": rel(e.raw),
            "fps": e.fps,
            "frame_count": e.frame_count,
            "preset": e.preset,
        }
        if e.annotations is not None:
            item["annotations"] = rel(e.annotations)
        if e.decoded:
            item["decoded"] = {
                str(qp): {"path": rel(rec["path"]), "size_bytes": rec["size_bytes"]}
                for qp, rec in sorted(e.decoded.items())
            }
        if e.postprocessed:
            item["postprocessed"] = {
                str(qp): rel(p) for qp, p in sorted(e.postprocessed.items())
            }
        doc["entries"].append(item)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


# -- synthetic rectangles ---------------------------------------------

# Rectangle palette on the 0-255 scale. "Strong" rectangles saturate
# enough to survive coarse quantization; "faint" ones are detectable in
# the raw video but collapse below the dominance threshold once coded
# at high QP, which is exactly the population a restoration model can
# win back. Green behaves differently from red and blue under the
# luma-weighted transform (its luma survives quantization), so faint
# rectangles are limited to classes 0 and 2.
_STRONG_PRIMARY = (235, 250)
_STRONG_OTHER = (5, 20)
_FAINT_PRIMARY = (200, 220)
_FAINT_OTHER = (33, 40)
_FAINT_CLASSES = (0, 2)


def synthesize_rectangles(frame_count: int, height: int, width: int, seed: int,
                          min_rects: int = 1, max_rects: int = 3,
                          faint_fraction: float = 0.5, fps: float = 30.0,
                          name: str = "synthetic") -> tuple:
    """Generate a rectangle sequence plus exact ground truth.

    Frames are a gray textured background (all three channels equal, so
    it never triggers the toy detector) with 1-3 colored rectangles.
    Returns (sequence, per-frame ground-truth lists).
    """
    if min(height, width) < 32:
        raise UsageError("synthetic frames must be at least 32x32")
    rng = np.random.default_rng(seed)
    frames = np.empty((frame_count, height, width, 3), dtype=FRAME_DTYPE)
    per_frame = []
    for i in range(frame_count):
        coarse = rng.uniform(0.38, 0.62, size=(height // 8 + 2, width // 8 + 2))
        grid = np.kron(coarse, np.ones((8, 8)))[:height, :width]
        frame = np.repeat(grid[..., None], 3, axis=2).astype(np.float64)
        objects = []
        occupied = []
        for _ in range(int(rng.integers(min_rects, max_rects + 1))):
            rect = _place_rectangle(rng, height, width, occupied)
            if rect is None:
                continue
            x0, y0, x1, y1 = rect
            class_id = int(rng.integers(3))
            faint = class_id in _FAINT_CLASSES and rng.random() < faint_fraction
            lo, hi = _FAINT_PRIMARY if faint else _STRONG_PRIMARY
            olo, ohi = _FAINT_OTHER if faint else _STRONG_OTHER
            color = np.empty(3)
            for c in range(3):
                band = (lo, hi) if c == class_id else (olo, ohi)
                color[c] = rng.integers(band[0], band[1] + 1) / 255.0
            frame[y0:y1, x0:x1] = color
            occupied.append(rect)
            objects.append(
                GroundTruthObject(
                    frame_index=i,
                    class_id=class_id,
                    box=(float(x0), float(y0), float(x1), float(y1)),
                )
            )
        frames[i] = frame.astype(FRAME_DTYPE)
        per_frame.append(objects)
    seq = VideoSequence(frames, fps=fps, name=name)
    return seq, per_frame


def _place_rectangle(rng, height, width, occupied, attempts: int = 20):
    margin = 4
    for _ in range(attempts):
        w = int(rng.integers(12, 25))
        h = int(rng.integers(12, 25))
        if w >= width - 2 or h >= height - 2:
            continue
        x0 = int(rng.integers(1, width - w))
        y0 = int(rng.integers(1, height - h))
        rect = (x0, y0, x0 + w, y0 + h)
        clear = True
        for ox0, oy0, ox1, oy1 in occupied:
            if (rect[0] < ox1 + margin and rect[2] > ox0 - margin
                    and rect[1] < oy1 + margin and rect[3] > oy0 - margin):
                clear = False
                break
        if clear:
            return rect
    return None


def build_synthetic_dataset(root, frame_count: int = 200, height: int = 64,
                            width: int = 64, seed: int = 0,
                            name: str = "rects") -> Path:
    """Write a self-contained synthetic dataset and return its manifest path."""
    root = Path(root)
    seq, per_frame = synthesize_rectangles(frame_count, height, width, seed, name=name)
    raw_path = root / f"{name}.y4m"
    write_y4m(raw_path, seq)
    ann_dir = root / f"{name}_annotations"
    write_annotations(ann_dir, name, dict(enumerate(per_frame)), (width, height))
    entry = ManifestEntry(
        id=name,
        raw=raw_path,
        fps=seq.fps,
        frame_count=frame_count,
        preset="A",
        annotations=ann_dir,
    )
    manifest = SequenceManifest(entries=[entry], root=root)
    return save_manifest(root / "manifest.json", manifest)
