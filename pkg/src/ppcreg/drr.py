"""Ray-casting DRR renderer.

Every detector pixel casts a ray from the source through the pixel centre.
The ray is mapped into volume coordinates with the inverse pose, clipped to
the volume box and integrated with a fixed-step midpoint rule.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import FormatError, InvalidArgumentError
from .geometry import ProjectionGeometry, RigidTransform, invert
from .volume import Volume, read_raw, write_raw

STYLES = ("bone", "realistic", "augmented", "external")
INTENSITY_MAPS = ("line_integral", "exponential")
DEFAULT_BONE_THRESHOLD = 0.01  # mm^-1, above the phantom soft tissue


@dataclass(frozen=True, eq=False)
class Image2D:
    """Detector image, ``data[v, u]`` with shape ``(height, width)``."""

    data: np.ndarray
    pixel_spacing: tuple[float, float] = (1.0, 1.0)
    style: str = "bone"

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim != 2:
            raise InvalidArgumentError(f"image data must be 2D, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidArgumentError("image data must be finite")
        su, sv = (float(s) for s in self.pixel_spacing)
        if su <= 0 or sv <= 0:
            raise InvalidArgumentError("pixel spacing must be positive")
        if self.style not in STYLES:
            raise InvalidArgumentError(f"unknown image style {self.style!r}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "pixel_spacing", (su, sv))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class RenderStyle:
    """``kind`` is ``bone`` (per-sample threshold) or ``realistic`` (all materials).

    ``step`` is the quadrature step in mm; ``None`` uses half the smallest
    voxel spacing of the rendered volume.
    """

    kind: str = "bone"
    threshold: float = DEFAULT_BONE_THRESHOLD
    intensity: str = "line_integral"
    step: float | None = None

    def __post_init__(self):
        if self.kind not in ("bone", "realistic"):
            raise InvalidArgumentError(f"render style must be bone or realistic, got {self.kind!r}")
        if self.intensity not in INTENSITY_MAPS:
            raise InvalidArgumentError(f"unknown intensity map {self.intensity!r}")
        if self.threshold < 0:
            raise InvalidArgumentError("bone threshold must be >= 0")
        if self.step is not None and not self.step > 0:
            raise InvalidArgumentError("step length must be > 0")

    @property
    def effective_threshold(self) -> float:
        return self.threshold if self.kind == "bone" else -np.inf

    def step_for(self, vol: Volume) -> float:
        return self.step if self.step is not None else 0.5 * float(np.min(vol.spacing))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "threshold": self.threshold, "intensity": self.intensity,
                "step": self.step}


BONE = RenderStyle("bone")
REALISTIC = RenderStyle("realistic")


def ray_box_interval(vol: Volume, origin, direction) -> tuple[float, float]:
    """Arc-length interval where the ray is inside the volume box (empty if t0 >= t1)."""
    o = vol.to_voxel(origin)
    d = np.asarray(direction, dtype=float) / vol.spacing
    hi = np.asarray(vol.dims, dtype=float) - 0.5
    return _kernels.clip_box(o, d, np.full(3, -0.5), hi)


def line_integral(vol: Volume, ray, style: RenderStyle, t_entry: float, t_exit: float) -> float:
    """Optical depth along ``origin + t * direction`` for ``t`` in ``[t_entry, t_exit]``.

    ``ray`` is ``(origin, unit direction)`` in volume coordinates (mm). The
    interval is clipped to the volume box first.
    """
    origin, direction = (np.asarray(a, dtype=float) for a in ray)
    if t_exit < t_entry:
        raise InvalidArgumentError("t_exit must be >= t_entry")
    b0, b1 = ray_box_interval(vol, origin, direction)
    t0, t1 = max(t_entry, b0), min(t_exit, b1)
    if not t1 > t0:
        return 0.0
    o = vol.to_voxel(origin)
    d = direction / vol.spacing
    return float(_kernels.integrate_segment(vol.data, o, d, t0, t1, style.step_for(vol),
                                            style.effective_threshold))


def render(vol: Volume, geom: ProjectionGeometry, T: RigidTransform, style: RenderStyle = BONE) -> Image2D:
    """Render the DRR of ``vol`` placed in the world by ``T``."""
    w, h = geom.size
    uu, vv = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    pix_world = geom.pixel_to_world(np.stack([uu, vv], axis=-1))
    Tinv = invert(T)
    src = Tinv.apply(geom.source)
    pix = np.ascontiguousarray(Tinv.apply(pix_world.reshape(-1, 3)).reshape(h, w, 3))
    thr = style.effective_threshold
    img = _kernels.render_rays(
        vol.data, _kernels.skip_grid(vol.data, thr), vol.spacing, vol.origin, src, pix,
        style.step_for(vol), thr, style.intensity == "exponential",
    )
    return Image2D(img, geom.pixel_spacing, style.kind)


def with_style(img: Image2D, style: str) -> Image2D:
    return replace(img, style=style)


def save_image(img: Image2D, path) -> None:
    """Raw header + float32 payload with dims ``(width, height, 1)``."""
    write_raw(path, img.data.T[:, :, None], (*img.pixel_spacing, 1.0), (0.0, 0.0, 0.0),
              {"style": img.style})


def load_image(path, style: str | None = None) -> Image2D:
    data, spacing, _, extra = read_raw(path)
    if data.shape[2] != 1:
        raise FormatError(f"image files need dims (w, h, 1), got {data.shape}", 0)
    st = style or extra.get("style", "external")
    return Image2D(data[:, :, 0].T.astype(float), (spacing[0], spacing[1]), st)


def to_uint8(data, lo: float | None = None, hi: float | None = None) -> np.ndarray:
    """Min-max window to 0..255; a constant image maps to 0."""
    a = np.asarray(data, dtype=float)
    lo = float(a.min()) if lo is None else lo
    hi = float(a.max()) if hi is None else hi
    if hi <= lo:
        return np.zeros(a.shape, dtype=np.uint8)
    scaled = np.clip((a - lo) / (hi - lo), 0.0, 1.0)
    return np.round(scaled * 255.0).astype(np.uint8)


def write_pgm(path, data) -> None:
    """8-bit binary PGM (P5). ``data`` is either floats (windowed) or uint8."""
    a = np.asarray(data)
    if a.dtype != np.uint8:
        a = to_uint8(a)
    h, w = a.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + a.tobytes())


_PGM_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    m = _PGM_HEADER.match(blob)
    if m is None:
        raise InvalidArgumentError("not a binary PGM file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise InvalidArgumentError("only 8-bit PGM is supported")
    return np.frombuffer(blob[m.end(): m.end() + w * h], dtype=np.uint8).reshape(h, w)
