"""Detector backends: feature pyramids for training, detections for scoring.

A backend exposes up to two capabilities. Feature extraction returns
three maps at increasing strides and feeds the training loss; detection
returns thresholded boxes and feeds the accuracy metrics. The bundled
toy backend implements both deterministically so the whole pipeline can
be exercised without any pretrained weights: its features are a small
per-plane stack (value, horizontal gradient, vertical gradient, local
3x3 mean, for each of R, G, B) pooled to the three strides, and its
detector thresholds per-channel color dominance and reads boxes off
connected components.
"""
from __future__ import annotations

import abc
import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .errors import (
    CapabilityError,
    ConfigurationError,
    ParseError,
    UsageError,
    ValidationError,
)
from .frames import check_frame
from .net import frame_to_tensor

DEFAULT_STRIDES = (8, 16, 32)
DEFAULT_CONF_THRESHOLD = 0.25
DOMINANCE_THRESHOLD = 0.6
MIN_COMPONENT_AREA = 9
NUM_TOY_CLASSES = 3


@dataclass(frozen=True)
class FeaturePyramid:
    """Exactly three feature maps, map k covering stride strides[k]."""

    maps: tuple
    strides: tuple = DEFAULT_STRIDES

    def __post_init__(self):
        if len(self.maps) != 3:
            raise ValidationError(f"a feature pyramid holds exactly 3 maps, got {len(self.maps)}")
        s1, s2, s3 = self.strides
        if not (0 < s1 < s2 < s3):
            raise ValidationError(f"strides must be positive and increasing, got {self.strides}")


@dataclass(frozen=True)
class Detection:
    class_id: int
    box: tuple
    confidence: float

    def __post_init__(self):
        if self.class_id < 0:
            raise ValidationError(f"class_id must be >= 0, got {self.class_id}")
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ValidationError(f"box must have positive extent, got {self.box}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError(f"confidence must lie in [0, 1], got {self.confidence}")


class DetectorBackend(abc.ABC):
    """Interface shared by every detector plug."""

    name: str = "backend"
    supports_features: bool = False
    supports_detection: bool = False
    differentiable: bool = False

    def extract_features(self, frame) -> FeaturePyramid:
        raise CapabilityError(f"backend {self.name!r} does not provide features")

    def detect(self, frame, conf_threshold: float) -> list:
        raise CapabilityError(f"backend {self.name!r} does not provide detection")


def pyramid_shape(height: int, width: int, stride: int) -> tuple:
    return (-(-height // stride), -(-width // stride))


def toy_detector_confidence(saturations) -> float:
    """Confidence of one detected component: its mean saturation, clipped.

    Saturation here is the per-pixel dominance of the component's color
    channel over the other two, so a pure-color region scores 1.0.
    """
    values = np.asarray(saturations, dtype=np.float64).ravel()
    if values.size < 1:
        raise UsageError("a component needs at least one pixel")
    return float(np.clip(values.mean(), 0.0, 1.0))


class ToyBackend(DetectorBackend):
    """Deterministic, differentiable stand-in for a real detector."""

    name = "toy"
    supports_features = True
    supports_detection = True
    differentiable = True

    def __init__(self, strides=DEFAULT_STRIDES,
                 dominance_threshold: float = DOMINANCE_THRESHOLD,
                 min_area: int = MIN_COMPONENT_AREA):
        s = tuple(int(v) for v in strides)
        if len(s) != 3 or not (0 < s[0] < s[1] < s[2]):
            raise ConfigurationError(f"strides must be three increasing integers, got {strides}")
        if not 0.0 < dominance_threshold <= 1.0:
            raise ConfigurationError(
                f"dominance_threshold must lie in (0, 1], got {dominance_threshold}"
            )
        if min_area < 1:
            raise ConfigurationError(f"min_area must be >= 1, got {min_area}")
        self.strides = s
        self.dominance_threshold = float(dominance_threshold)
        self.min_area = int(min_area)

    # -- feature side -------------------------------------------------

    def feature_stack(self, x: torch.Tensor) -> torch.Tensor:
        """Per-plane feature stack of a (N, 3, H, W) tensor, differentiable.

        Channels are [R G B | hgrad x3 | vgrad x3 | local mean x3].
        Gradients are central differences with replicated edges; the
        local mean is a replicate-padded 3x3 box average.
        """
        xp = F.pad(x, (1, 1, 1, 1), mode="replicate")
        hgrad = (xp[..., 1:-1, 2:] - xp[..., 1:-1, :-2]) * 0.5
        vgrad = (xp[..., 2:, 1:-1] - xp[..., :-2, 1:-1]) * 0.5
        mean3 = F.avg_pool2d(xp, 3, stride=1)
        return torch.cat([x, hgrad, vgrad, mean3], dim=1)

    def features_torch(self, x: torch.Tensor) -> list:
        """The three pooled pyramid maps of a (N, 3, H, W) tensor."""
        stack = self.feature_stack(x)
        return [
            F.avg_pool2d(stack, s, stride=s, ceil_mode=True, count_include_pad=False)
            for s in self.strides
        ]

    def extract_features(self, frame) -> FeaturePyramid:
        f = check_frame(frame)
        with torch.no_grad():
            maps = self.features_torch(frame_to_tensor(f))
        return FeaturePyramid(
            maps=tuple(m.squeeze(0).numpy() for m in maps),
            strides=self.strides,
        )

    # -- detection side -----------------------------------------------

    def dominance(self, frame: np.ndarray) -> np.ndarray:
        """(3, H, W) array: each channel minus the max of the other two."""
        f = check_frame(frame)
        out = np.empty((3,) + f.shape[:2], dtype=np.float64)
        for c in range(3):
            others = [i for i in range(3) if i != c]
            out[c] = f[..., c] - np.maximum(f[..., others[0]], f[..., others[1]])
        return out

    def detect(self, frame, conf_threshold: float = DEFAULT_CONF_THRESHOLD) -> list:
        if not 0.0 <= conf_threshold <= 1.0:
            raise UsageError(f"conf_threshold must lie in [0, 1], got {conf_threshold}")
        dom = self.dominance(frame)
        eight = np.ones((3, 3), dtype=int)
        found = []
        for class_id in range(NUM_TOY_CLASSES):
            mask = dom[class_id] >= self.dominance_threshold
            labels, count = ndimage.label(mask, structure=eight)
            for comp in range(1, count + 1):
                ys, xs = np.nonzero(labels == comp)
                if ys.size < self.min_area:
                    continue
                confidence = toy_detector_confidence(dom[class_id][ys, xs])
                if confidence < conf_threshold:
                    continue
                box = (float(xs.min()), float(ys.min()),
                       float(xs.max() + 1), float(ys.max() + 1))
                found.append(Detection(class_id, box, confidence))
        found.sort(key=lambda d: (-d.confidence, d.box[0], d.box[1]))
        return found


class ExternalBackend(DetectorBackend):
    """Detection through an external command, one invocation per frame.

    The command template must contain {input} and {output}; the frame is
    written as a PNG and detections are read back in the dump format
    (see read_detections). No feature capability, not differentiable.
    """

    name = "external"
    supports_detection = True

    def __init__(self, command_template: str):
        from .errors import TemplateError

        for placeholder in ("{input}", "{output}"):
            if placeholder not in command_template:
                raise TemplateError(f"detector command template is missing {placeholder}")
        self.command_template = command_template

    def detect(self, frame, conf_threshold: float = DEFAULT_CONF_THRESHOLD) -> list:
        from PIL import Image

        from .errors import CodecError

        f = check_frame(frame)
        with tempfile.TemporaryDirectory(prefix="vcmpost-detect-") as tmp:
            in_path = Path(tmp) / "frame.png"
            out_path = Path(tmp) / "detections.txt"
            img = np.rint(f * 255.0).astype(np.uint8)
            Image.fromarray(img).save(in_path)
            cmd = self.command_template.replace("{input}", str(in_path))
            cmd = cmd.replace("{output}", str(out_path))
            proc = subprocess.run(shlex.split(cmd), capture_output=True)
            if proc.returncode != 0:
                raise CodecError(
                    f"external detector failed with exit {proc.returncode}: "
                    f"{proc.stderr.decode(errors='replace')[-500:]}"
                )
            dets = read_detections(out_path) if out_path.exists() else []
        kept = [d for d in dets if d.confidence >= conf_threshold]
        kept.sort(key=lambda d: (-d.confidence, d.box[0], d.box[1]))
        return kept


def extract_features(backend: DetectorBackend, frame) -> FeaturePyramid:
    if not backend.supports_features:
        raise CapabilityError(f"backend {backend.name!r} does not provide features")
    return backend.extract_features(frame)


def detect(backend: DetectorBackend, frame,
           conf_threshold: float = DEFAULT_CONF_THRESHOLD) -> list:
    if not backend.supports_detection:
        raise CapabilityError(f"backend {backend.name!r} does not provide detection")
    if not 0.0 <= conf_threshold <= 1.0:
        raise UsageError(f"conf_threshold must lie in [0, 1], got {conf_threshold}")
    return backend.detect(frame, conf_threshold)


def make_backend(spec: str) -> DetectorBackend:
    """Build a backend from a CLI spec: "toy" or "external:<command>"."""
    if spec == "toy":
        return ToyBackend()
    if spec.startswith("external:"):
        return ExternalBackend(spec[len("external:"):])
    raise ConfigurationError(
        f"unknown backend spec {spec!r}; use 'toy' or 'external:<command>'"
    )


def write_detections(path, detections) -> None:
    """One line per detection: class conf x_min y_min x_max y_max."""
    lines = []
    for d in detections:
        x0, y0, x1, y1 = d.box
        lines.append(
            f"{d.class_id} {d.confidence:.6f} {x0:.6f} {y0:.6f} {x1:.6f} {y1:.6f}"
        )
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_detections(path) -> list:
    path = Path(path)
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        text = line.strip()
        if not text:
            continue
        parts = text.split()
        if len(parts) != 6:
            raise ParseError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
        try:
            class_id = int(parts[0])
            conf = float(parts[1])
            box = tuple(float(v) for v in parts[2:])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
        out.append(Detection(class_id, box, conf))
    return out
