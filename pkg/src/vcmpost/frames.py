"""Frame and sequence primitives shared by every stage of the pipeline.

A frame is a numpy array of shape (H, W, 3), dtype float32, values in
[0, 1], RGB channel order. A sequence stacks frames along a leading axis
and carries the frame rate and a name.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError, ShapeMismatchError, ValidationError

FRAME_DTYPE = np.float32


def check_frame(frame, name: str = "frame") -> np.ndarray:
    """Validate one frame and return it as a float32 (H, W, 3) array.

    Integer inputs are rejected (the value scale would be ambiguous);
    float64 input is narrowed to float32, which is the package-wide
    frame dtype.
    """
    arr = np.asarray(frame)
    if not np.issubdtype(arr.dtype, np.floating):
        raise ValidationError(
            f"{name} must be a float array in [0, 1], got dtype {arr.dtype}"
        )
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeMismatchError(
            f"{name} must have shape (H, W, 3), got {arr.shape}"
        )
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeMismatchError(f"{name} must be at least 1x1, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValidationError(f"{name} contains non-finite values")
    lo = float(arr.min())
    hi = float(arr.max())
    if lo < 0.0 or hi > 1.0:
        raise ValidationError(
            f"{name} values must lie in [0, 1], got range [{lo:g}, {hi:g}]"
        )
    if arr.dtype != FRAME_DTYPE:
        arr = arr.astype(FRAME_DTYPE)
    return np.ascontiguousarray(arr)


def check_frame_stack(frames, name: str = "frames") -> np.ndarray:
    """Validate a batch of frames and return a (N, H, W, 3) float32 array.

    Accepts a 4-d array or any iterable of frames; all frames must share
    one size.
    """
    if isinstance(frames, np.ndarray) and frames.ndim == 4:
        stack = [check_frame(frames[i], f"{name}[{i}]") for i in range(frames.shape[0])]
    else:
        stack = [check_frame(f, f"{name}[{i}]") for i, f in enumerate(frames)]
    if not stack:
        raise ValidationError(f"{name} is empty")
    shape = stack[0].shape
    for i, f in enumerate(stack):
        if f.shape != shape:
            raise ShapeMismatchError(
                f"{name}[{i}] has shape {f.shape}, expected {shape}"
            )
    return np.stack(stack, axis=0)


@dataclass
class VideoSequence:
    """Frames of one video clip plus the metadata the pipeline needs."""

    frames: np.ndarray
    fps: float
    name: str = ""

    def __post_init__(self):
        self.frames = check_frame_stack(self.frames, "frames")
        if not self.fps > 0:
            raise ValidationError(f"fps must be positive, got {self.fps}")

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    def __len__(self) -> int:
        return self.frame_count

    def __getitem__(self, index: int) -> np.ndarray:
        return self.frames[index]


def check_aligned(a: VideoSequence, b: VideoSequence) -> None:
    """Raise unless two sequences agree in frame count and frame size."""
    if a.frame_count != b.frame_count:
        raise AlignmentError(
            f"frame counts differ: {a.name or 'first'} has {a.frame_count}, "
            f"{b.name or 'second'} has {b.frame_count}"
        )
    if (a.height, a.width) != (b.height, b.width):
        raise AlignmentError(
            f"frame sizes differ: {a.height}x{a.width} vs {b.height}x{b.width}"
        )
