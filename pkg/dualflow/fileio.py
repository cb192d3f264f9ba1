"""Frame directories, Middlebury ``.flo`` files and flow visualizations."""

from __future__ import annotations

import json
import logging
import re
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb
from PIL import Image

from dualflow.atomic import atomic_write
from dualflow.errors import (
    BadDimensionsError,
    BadMagicError,
    NonFiniteError,
    SequenceLoadError,
    ShapeError,
    TruncatedFileError,
)
from dualflow.flow import FlowField
from dualflow.stimuli import StimulusMetadata, StimulusSequence

logger = logging.getLogger(__name__)

FLO_MAGIC = 202021.25
FLO_HEADER = 12
FRAME_SUFFIXES = (".png", ".pgm", ".ppm")
FRAME_PREFIX = "frame_"
LABEL_FLOW = "flow.flo"
LABEL_MASK = "mask.pgm"
METADATA = "metadata.json"
_DIGITS = re.compile(r"(\d+)")


def write_flo(flow: FlowField, path: str | Path) -> Path:
    """Little-endian ``.flo``: magic, width, height, then interleaved (u, v) rows."""
    hwc = flow.hwc()
    if not np.all(np.isfinite(hwc)):
        raise NonFiniteError("cannot write a flow field with non-finite values")
    height, width = flow.shape
    path = Path(path)
    with atomic_write(path, "wb") as fh:
        fh.write(np.array([FLO_MAGIC], dtype="<f4").tobytes())
        fh.write(np.array([width, height], dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(hwc, dtype="<f4").tobytes())
    return path


def read_flo(path: str | Path) -> FlowField:
    raw = Path(path).read_bytes()
    if len(raw) < FLO_HEADER:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes is shorter than the .flo header")
    magic = np.frombuffer(raw, dtype="<f4", count=1)[0]
    if magic != np.float32(FLO_MAGIC):
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {FLO_MAGIC}")
    width, height = (int(x) for x in np.frombuffer(raw, dtype="<i4", count=2, offset=4))
    if width <= 0 or height <= 0:
        raise BadDimensionsError(f"{path}: invalid dimensions {width}x{height}")
    expected = FLO_HEADER + 8 * width * height
    if len(raw) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", count=2 * width * height, offset=FLO_HEADER)
    return FlowField.from_hwc(data.reshape(height, width, 2).astype(np.float64))


def _frame_number(path: Path) -> tuple[int, str]:
    digits = _DIGITS.findall(path.stem)
    return (int(digits[-1]) if digits else -1, path.name)


def _read_frame(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            if img.mode in ("I;16", "I;16B", "I;16L", "I"):
                return np.asarray(img, dtype=float) / 65535.0
            if img.mode in ("RGB", "RGBA", "P"):
                return np.asarray(img.convert("RGB"), dtype=float).transpose(2, 0, 1) / 255.0
            return np.asarray(img.convert("L"), dtype=float) / 255.0
    except OSError as exc:
        raise SequenceLoadError(f"cannot read frame {path}: {exc}") from exc


def frame_paths(directory: str | Path, pattern: str = "*") -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise SequenceLoadError(f"{directory} is not a directory")
    paths = [
        p
        for p in directory.glob(pattern)
        if p.suffix.lower() in FRAME_SUFFIXES and p.name != LABEL_MASK and p.is_file()
    ]
    return sorted(paths, key=_frame_number)


def load_sequence(directory: str | Path, pattern: str = "*") -> StimulusSequence:
    """Numbered PGM/PNG frames sorted numerically and scaled to [0, 1].

    Colour frames stay RGB; a mix of gray and colour frames is promoted to RGB.
    """
    paths = frame_paths(directory, pattern)
    if not paths:
        raise SequenceLoadError(f"no frames matching {pattern!r} in {directory}")
    frames = [_read_frame(p) for p in paths]
    size = frames[0].shape[-2:]
    for path, frame in zip(paths, frames):
        if frame.shape[-2:] != size:
            raise SequenceLoadError(
                f"frame {path.name} is {frame.shape[-1]}x{frame.shape[-2]}, expected {size[1]}x{size[0]}"
            )
    if any(f.ndim == 3 for f in frames):
        frames = [f if f.ndim == 3 else np.repeat(f[None], 3, axis=0) for f in frames]
    meta = StimulusMetadata(kind="loaded", params=dict(source=str(directory), files=[p.name for p in paths]))
    metadata_file = Path(directory) / METADATA
    if metadata_file.is_file():
        try:
            meta = StimulusMetadata.model_validate_json(metadata_file.read_text())
        except ValueError as exc:
            logger.warning("Ignoring unreadable %s: %s", metadata_file, exc)
    logger.debug("Loaded %d frames from %s", len(frames), directory)
    return StimulusSequence(frames=np.stack(frames), metadata=meta)


def load_labeled_sequence(directory: str | Path) -> tuple[StimulusSequence, FlowField]:
    """Frames ``frame_*`` plus ``flow.flo`` for the labelled frame."""
    directory = Path(directory)
    seq = load_sequence(directory, f"{FRAME_PREFIX}*")
    flow_path = directory / LABEL_FLOW
    if not flow_path.is_file():
        raise SequenceLoadError(f"{directory} has no {LABEL_FLOW}")
    flow = read_flo(flow_path)
    if flow.shape != seq.size:
        raise ShapeError(f"{flow_path}: flow is {flow.shape}, frames are {seq.size}")
    return seq, flow


def _to_uint8(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def _save_image(image: Image.Image, path: Path, fmt: str) -> Path:
    with atomic_write(path, "wb") as fh:
        image.save(fh, format=fmt)
    return path


def write_sequence(seq: StimulusSequence, directory: str | Path) -> Path:
    """Frames as 8-bit PNGs, metadata JSON, the labelled flow and its region mask."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    width = max(3, len(str(seq.n_frames - 1)))
    for t, frame in enumerate(seq.frames):
        pixels = _to_uint8(frame.transpose(1, 2, 0) if seq.is_rgb else frame)
        _save_image(Image.fromarray(pixels), directory / f"{FRAME_PREFIX}{t:0{width}d}.png", "PNG")
    with atomic_write(directory / METADATA, "w") as fh:
        fh.write(json.dumps(seq.metadata.model_dump(mode="json"), indent=2))
    if seq.gt_flow is not None and seq.n_frames >= 11:
        write_flo(seq.label_flow(), directory / LABEL_FLOW)
    if seq.masks is not None and seq.n_frames >= 11:
        write_mask_pgm(seq.masks[seq.label_index], directory / LABEL_MASK)
    return directory


def write_mask_pgm(mask: np.ndarray, path: str | Path) -> Path:
    """Binary mask as an 8-bit PGM (0 / 255)."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeError(f"mask must be 2D, got {mask.shape}")
    return _save_image(Image.fromarray(np.where(mask.astype(bool), 255, 0).astype(np.uint8)), Path(path), "PPM")


def flow_to_image(flow: FlowField, max_speed: float | None = None) -> np.ndarray:
    """Colour-wheel rendering [H,W,3] uint8: hue is direction, saturation is speed.

    Speeds are scaled by ``max_speed`` (default: the field's maximum). Zero
    flow renders white.
    """
    hwc = flow.hwc()
    if not np.all(np.isfinite(hwc)):
        raise NonFiniteError("cannot render a flow field with non-finite values")
    speed = np.hypot(hwc[..., 0], hwc[..., 1])
    scale = float(speed.max()) if max_speed is None else float(max_speed)
    hsv = np.empty(hwc.shape[:2] + (3,))
    hsv[..., 0] = np.mod(np.arctan2(hwc[..., 1], hwc[..., 0]), 2.0 * np.pi) / (2.0 * np.pi)
    hsv[..., 1] = np.clip(speed / scale, 0.0, 1.0) if scale > 0 else 0.0
    hsv[..., 2] = 1.0
    return _to_uint8(hsv_to_rgb(hsv))


def write_flow_png(flow: FlowField, path: str | Path, max_speed: float | None = None) -> Path:
    return _save_image(Image.fromarray(flow_to_image(flow, max_speed)), Path(path), "PNG")
