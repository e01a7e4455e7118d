"""Color conversion, Y4M handling, a deterministic mock codec, and the
wrapper that drives an external encoder binary.

Color math is BT.709 limited range. Chroma is subsampled 4:2:0 by 2x2
box averaging on the way in and upsampled nearest-neighbor on the way
out, which keeps both directions cheap and reproducible.

The mock codec quantizes sample values with a step that doubles every
six QP, mirroring how real codec quantizers scale, and reports the size
of a run-length plus deflate coding of the quantization indices. It is
not a video codec, but it yields a faithful rate-distortion knee for
desk-scale experiments.
"""
from __future__ import annotations

import hashlib
import json
import shlex
import subprocess
import zlib
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import (
    CodecError,
    EncoderEnvironmentError,
    FormatError,
    ShapeMismatchError,
    TemplateError,
    UsageError,
    ValidationError,
)
from .frames import FRAME_DTYPE, VideoSequence, check_frame

DEFAULT_QP_SWEEP = (27, 32, 37, 42, 47)
RANDOM_ACCESS = "random-access"

# BT.709 luma weights and limited-range chroma scale factors.
_KR, _KG, _KB = 0.2126, 0.7152, 0.0722
_CB_SCALE = 1.8556
_CR_SCALE = 1.5748


@dataclass
class YuvFrame:
    """Planar 8-bit 4:2:0 frame: full-size luma, quarter-size chroma."""

    y: np.ndarray
    cb: np.ndarray
    cr: np.ndarray

    def __post_init__(self):
        for name in ("y", "cb", "cr"):
            plane = getattr(self, name)
            if plane.dtype != np.uint8 or plane.ndim != 2:
                raise FormatError(f"{name} plane must be a 2-d uint8 array")
        h, w = self.y.shape
        if self.cb.shape != (h // 2, w // 2) or self.cr.shape != (h // 2, w // 2):
            raise FormatError(
                f"chroma planes must be {(h // 2, w // 2)}, got "
                f"{self.cb.shape} and {self.cr.shape}"
            )

    @property
    def height(self) -> int:
        return self.y.shape[0]

    @property
    def width(self) -> int:
        return self.y.shape[1]


def rgb_to_yuv420(frame) -> YuvFrame:
    """BT.709 limited-range conversion with 2x2 box-averaged chroma."""
    f = check_frame(frame).astype(np.float64)
    h, w = f.shape[:2]
    if h % 2 or w % 2:
        raise ShapeMismatchError(
            f"4:2:0 subsampling needs even frame dimensions, got {h}x{w}"
        )
    r, g, b = f[..., 0], f[..., 1], f[..., 2]
    luma = _KR * r + _KG * g + _KB * b
    y = np.rint(16.0 + 219.0 * luma)
    pb = (b - luma) / _CB_SCALE
    pr = (r - luma) / _CR_SCALE
    pb_sub = pb.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
    pr_sub = pr.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
    cb = np.rint(128.0 + 224.0 * pb_sub)
    cr = np.rint(128.0 + 224.0 * pr_sub)
    return YuvFrame(
        y=np.clip(y, 0, 255).astype(np.uint8),
        cb=np.clip(cb, 0, 255).astype(np.uint8),
        cr=np.clip(cr, 0, 255).astype(np.uint8),
    )


def yuv420_to_rgb(yuv: YuvFrame) -> np.ndarray:
    """Inverse transform with nearest-neighbor chroma upsampling."""
    luma = (yuv.y.astype(np.float64) - 16.0) / 219.0
    pb = (yuv.cb.astype(np.float64) - 128.0) / 224.0
    pr = (yuv.cr.astype(np.float64) - 128.0) / 224.0
    pb = pb.repeat(2, axis=0).repeat(2, axis=1)
    pr = pr.repeat(2, axis=0).repeat(2, axis=1)
    r = luma + _CR_SCALE * pr
    b = luma + _CB_SCALE * pb
    g = (luma - _KR * r - _KB * b) / _KG
    rgb = np.stack([r, g, b], axis=-1)
    return np.clip(rgb, 0.0, 1.0).astype(FRAME_DTYPE)


# -- Y4M files --------------------------------------------------------


def _fps_ratio(fps: float) -> Fraction:
    return Fraction(fps).limit_denominator(100000)


def write_y4m(path, seq: VideoSequence) -> Path:
    path = Path(path)
    ratio = _fps_ratio(seq.fps)
    header = (
        f"YUV4MPEG2 W{seq.width} H{seq.height} "
        f"F{ratio.numerator}:{ratio.denominator} Ip A1:1 C420\n"
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for i in range(seq.frame_count):
            yuv = rgb_to_yuv420(seq.frames[i])
            fh.write(b"FRAME\n")
            fh.write(yuv.y.tobytes())
            fh.write(yuv.cb.tobytes())
            fh.write(yuv.cr.tobytes())
    return path


def read_y4m(path) -> VideoSequence:
    path = Path(path)
    data = path.read_bytes()
    nl = data.find(b"\n")
    if nl < 0 or not data.startswith(b"YUV4MPEG2"):
        raise FormatError(f"{path}: not a Y4M file")
    width = height = None
    fps = Fraction(25, 1)
    for token in data[:nl].decode("ascii", errors="replace").split()[1:]:
        tag, rest = token[0], token[1:]
        if tag == "W":
            width = int(rest)
        elif tag == "H":
            height = int(rest)
        elif tag == "F":
            num, den = rest.split(":")
            fps = Fraction(int(num), int(den))
        elif tag == "C" and not rest.startswith("420"):
            raise FormatError(f"{path}: unsupported chroma format C{rest}")
    if not width or not height:
        raise FormatError(f"{path}: header is missing frame dimensions")
    if width % 2 or height % 2:
        raise FormatError(f"{path}: 4:2:0 needs even dimensions, got {width}x{height}")
    y_size = width * height
    c_size = (width // 2) * (height // 2)
    frame_bytes = y_size + 2 * c_size
    frames = []
    pos = nl + 1
    while pos < len(data):
        line_end = data.find(b"\n", pos)
        if line_end < 0 or not data[pos:line_end].startswith(b"FRAME"):
            raise FormatError(f"{path}: malformed frame marker at byte {pos}")
        pos = line_end + 1
        chunk = data[pos:pos + frame_bytes]
        if len(chunk) != frame_bytes:
            raise FormatError(f"{path}: truncated frame payload at byte {pos}")
        y = np.frombuffer(chunk[:y_size], dtype=np.uint8).reshape(height, width)
        cb = np.frombuffer(chunk[y_size:y_size + c_size], dtype=np.uint8)
        cr = np.frombuffer(chunk[y_size + c_size:], dtype=np.uint8)
        yuv = YuvFrame(
            y=y.copy(),
            cb=cb.reshape(height // 2, width // 2).copy(),
            cr=cr.reshape(height // 2, width // 2).copy(),
        )
        frames.append(yuv420_to_rgb(yuv))
        pos += frame_bytes
    if not frames:
        raise FormatError(f"{path}: contains no frames")
    return VideoSequence(np.stack(frames), fps=float(fps), name=path.stem)


# -- mock codec -------------------------------------------------------


def quant_step(qp: int) -> int:
    """Quantization step for a QP: doubles every 6, never below 1."""
    if not isinstance(qp, (int, np.integer)) or not 0 <= qp <= 63:
        raise UsageError(f"qp must be an integer in [0, 63], got {qp!r}")
    return max(1, int(np.floor(2.0 ** ((qp - 4) / 6.0) + 0.5)))


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5)


def _rle_bytes(values: np.ndarray) -> bytes:
    """Run-length code a flat uint8 array as (value, run) byte pairs."""
    flat = values.ravel()
    if flat.size == 0:
        return b""
    boundaries = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [flat.size]))
    out = bytearray()
    for s, e in zip(starts, ends):
        value = int(flat[s])
        run = int(e - s)
        while run > 255:
            out.append(value)
            out.append(255)
            run -= 255
        out.append(value)
        out.append(run)
    return bytes(out)


def _quantize_plane(plane: np.ndarray, delta: int) -> tuple:
    """Quantize one 0-255 plane; returns (decoded float array, indices)."""
    q = _round_half_away(plane.astype(np.float64) / delta)
    decoded = np.clip(q * delta, 0.0, 255.0)
    return decoded, q.astype(np.uint8)


def _coded_size(index_planes) -> int:
    blob = b"".join(_rle_bytes(p) for p in index_planes)
    return len(zlib.compress(blob, 9))


def mock_codec(seq: VideoSequence, qp: int) -> tuple:
    """Quantize the RGB samples of a sequence directly.

    Returns the decoded sequence and the coded size in bytes. QP 4 has
    step 1 and is lossless for frames whose values sit on the 8-bit
    grid. Applying the codec twice at one QP equals applying it once.
    """
    delta = quant_step(qp)
    decoded = np.empty_like(seq.frames)
    indices = []
    for i in range(seq.frame_count):
        for c in range(3):
            plane = seq.frames[i][..., c].astype(np.float64) * 255.0
            dec, q = _quantize_plane(plane, delta)
            decoded[i][..., c] = (dec / 255.0).astype(FRAME_DTYPE)
            indices.append(q)
    size = _coded_size(indices)
    return VideoSequence(decoded, fps=seq.fps, name=seq.name), size


def mock_codec_yuv(seq: VideoSequence, qp: int) -> tuple:
    """Mock codec routed through 4:2:0: quantize the Y/Cb/Cr planes.

    This is the variant the prepare stage uses; at QP 4 the decoded
    output equals a plain YUV round-trip of the input.
    """
    delta = quant_step(qp)
    decoded = []
    indices = []
    for i in range(seq.frame_count):
        yuv = rgb_to_yuv420(seq.frames[i])
        planes = []
        for plane in (yuv.y, yuv.cb, yuv.cr):
            dec, q = _quantize_plane(plane.astype(np.float64), delta)
            planes.append(np.clip(dec, 0, 255).astype(np.uint8))
            indices.append(q)
        decoded.append(yuv420_to_rgb(YuvFrame(*planes)))
    size = _coded_size(indices)
    return VideoSequence(np.stack(decoded), fps=seq.fps, name=seq.name), size


def measure_bitrate(size_bytes: int, frame_count: int, fps: float) -> float:
    """Kilobits per second of a payload spanning frame_count frames."""
    if frame_count < 1:
        raise UsageError(f"frame_count must be >= 1, got {frame_count}")
    if not fps > 0:
        raise UsageError(f"fps must be positive, got {fps}")
    if size_bytes < 0:
        raise UsageError(f"size_bytes must be >= 0, got {size_bytes}")
    return size_bytes * 8.0 / (frame_count / fps) / 1000.0


# -- external encoder -------------------------------------------------


@dataclass
class Bitstream:
    path: Path
    size_bytes: int


@dataclass
class CodecJob:
    """One encode of one sequence at one QP, confined to its workdir."""

    qp: int
    encoder_spec: str
    input: VideoSequence
    workdir: Path
    config_name: str = RANDOM_ACCESS
    config_path: Path | None = None

    def __post_init__(self):
        if not isinstance(self.qp, (int, np.integer)) or not 0 <= self.qp <= 63:
            raise ValidationError(f"qp must be an integer in [0, 63], got {self.qp!r}")
        self.workdir = Path(self.workdir)


REQUIRED_PLACEHOLDERS = ("{input}", "{output}", "{bitstream}", "{qp}")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def encode_decode_external(job: CodecJob) -> tuple:
    """Run the external encoder named by the job's command template.

    The template must contain {input}, {output}, {bitstream} and {qp};
    {config} is substituted when present. Returns the decoded sequence
    and the bitstream, and writes a job.json log into the workdir.
    """
    template = job.encoder_spec
    for placeholder in REQUIRED_PLACEHOLDERS:
        if placeholder not in template:
            raise TemplateError(f"encoder command template is missing {placeholder}")
    job.workdir.mkdir(parents=True, exist_ok=True)
    input_path = job.workdir / "input.y4m"
    output_path = job.workdir / "decoded.y4m"
    bitstream_path = job.workdir / "stream.bin"
    write_y4m(input_path, job.input)
    checksum_before = _sha256(input_path)
    cmd = template
    cmd = cmd.replace("{input}", str(input_path))
    cmd = cmd.replace("{output}", str(output_path))
    cmd = cmd.replace("{bitstream}", str(bitstream_path))
    cmd = cmd.replace("{qp}", str(job.qp))
    if "{config}" in cmd:
        cmd = cmd.replace("{config}", str(job.config_path or job.config_name))
    argv = shlex.split(cmd)
    try:
        proc = subprocess.run(argv, capture_output=True)
    except FileNotFoundError as exc:
        raise EncoderEnvironmentError(f"encoder binary not found: {argv[0]!r}") from exc
    if proc.returncode != 0:
        raise CodecError(
            f"encoder exited with {proc.returncode}; last output: "
            f"{(proc.stderr or proc.stdout).decode(errors='replace')[-800:]}"
        )
    if _sha256(input_path) != checksum_before:
        raise CodecError("encoder modified its input file")
    if not output_path.exists():
        raise CodecError(f"encoder produced no decoded output at {output_path}")
    if not bitstream_path.exists():
        raise CodecError(f"encoder produced no bitstream at {bitstream_path}")
    decoded = read_y4m(output_path)
    size = bitstream_path.stat().st_size
    log = {
        "command": cmd,
        "qp": job.qp,
        "config_name": job.config_name,
        "input": str(input_path),
        "input_sha256": checksum_before,
        "output": str(output_path),
        "output_sha256": _sha256(output_path),
        "bitstream": str(bitstream_path),
        "bitstream_bytes": size,
    }
    (job.workdir / "job.json").write_text(json.dumps(log, indent=2, sort_keys=True) + "\n")
    return decoded, Bitstream(path=bitstream_path, size_bytes=size)
