"""Attenuation volumes: container, trilinear sampling, raw file I/O and phantoms.

Voxel ``(i, j, k)`` has its centre at ``origin + (i + 0.5, j + 0.5, k + 0.5) * spacing``,
so the volume occupies the box ``[origin, origin + dims * spacing]``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import FormatError, InvalidArgumentError

HEADER_KEYS = ("dims", "spacing", "origin", "dtype", "byte_order")


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar attenuation grid (mm^-1) with physical spacing and origin (mm).

    ``data`` is a float32 array of shape ``(nx, ny, nz)`` indexed ``[i, j, k]``.
    """

    data: np.ndarray
    spacing: np.ndarray = field(default_factory=lambda: np.ones(3))
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    name: str = "volume"

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        spacing = np.asarray(self.spacing, dtype=float).reshape(-1)
        origin = np.asarray(self.origin, dtype=float).reshape(-1)
        if data.ndim != 3 or min(data.shape) < 2:
            raise InvalidArgumentError(f"volume needs 3 dims of at least 2 voxels, got {data.shape}")
        if spacing.shape != (3,) or np.any(spacing <= 0) or not np.all(np.isfinite(spacing)):
            raise InvalidArgumentError("spacing must be 3 positive finite values")
        if origin.shape != (3,) or not np.all(np.isfinite(origin)):
            raise InvalidArgumentError("origin must be a finite 3-vector")
        if not np.all(np.isfinite(data)):
            raise InvalidArgumentError("volume data must be finite")
        for a in (data, spacing, origin):
            a.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.dims) * self.spacing

    @property
    def center(self) -> np.ndarray:
        return self.origin + 0.5 * self.extent

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.origin.copy(), self.origin + self.extent

    def voxel_centers(self, index) -> np.ndarray:
        """Physical centres for integer voxel indices ``(N, 3)``."""
        return self.origin + (np.asarray(index, dtype=float) + 0.5) * self.spacing

    def to_voxel(self, pos) -> np.ndarray:
        """Continuous voxel coordinates (centres on integers)."""
        return (np.asarray(pos, dtype=float) - self.origin) / self.spacing - 0.5

    def corners(self) -> np.ndarray:
        lo, hi = self.bounds()
        return np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])

    def checksum(self) -> str:
        """SHA-256 over the x-fastest little-endian float32 payload."""
        return hashlib.sha256(_payload(self.data)).hexdigest()

    def scaled(self, factor: float) -> Volume:
        return Volume(self.data * np.float32(factor), self.spacing, self.origin, self.name)


def sample_trilinear(vol: Volume, pos) -> float:
    """Trilinearly interpolated value at a physical position; 0 outside the grid box."""
    c = vol.to_voxel(pos)
    if not np.all(np.isfinite(c)):
        raise InvalidArgumentError("sample position must be finite")
    return float(_kernels.trilinear(vol.data, c[0], c[1], c[2]))


def sample_points(vol: Volume, positions) -> np.ndarray:
    """Vectorised :func:`sample_trilinear` for ``(N, 3)`` positions."""
    c = np.ascontiguousarray(vol.to_voxel(np.atleast_2d(positions)))
    return _kernels.trilinear_many(vol.data, c)


# ---------------------------------------------------------------------------
# raw header + float32 payload format (shared with 2D images)


def _payload(data3d: np.ndarray) -> bytes:
    return np.asarray(data3d, dtype="<f4").tobytes(order="F")


def write_raw(path, data3d, spacing, origin, extra: dict | None = None) -> None:
    """Write a header + raw little-endian float32 file, x fastest."""
    data3d = np.asarray(data3d)
    lines = [
        "dims: " + " ".join(str(int(n)) for n in data3d.shape),
        "spacing: " + " ".join(repr(float(s)) for s in spacing),
        "origin: " + " ".join(repr(float(o)) for o in origin),
        "dtype: float32",
        "byte_order: little",
    ]
    for k, v in (extra or {}).items():
        lines.append(f"{k}: {v}")
    header = ("\n".join(lines) + "\n\n").encode("ascii")
    Path(path).write_bytes(header + _payload(data3d))


def read_raw(path):
    """Parse a raw file; returns ``(data3d, spacing, origin, extra)``."""
    blob = Path(path).read_bytes()
    sep = blob.find(b"\n\n")
    if sep < 0:
        raise FormatError("missing blank line terminating the header", len(blob))
    fields = {}
    offset = 0
    for line in blob[:sep].split(b"\n"):
        try:
            text = line.decode("ascii")
        except UnicodeDecodeError:
            raise FormatError("non-ASCII header line", offset) from None
        key, colon, value = text.partition(":")
        if not colon:
            raise FormatError(f"header line without ':' ({text!r})", offset)
        fields[key.strip()] = (value.strip(), offset)
        offset += len(line) + 1
    for key in HEADER_KEYS:
        if key not in fields:
            raise FormatError(f"header key {key!r} missing", sep)

    def numbers(key, kind, count):
        value, off = fields[key]
        try:
            nums = [kind(x) for x in value.split()]
        except ValueError:
            raise FormatError(f"unparsable {key}: {value!r}", off) from None
        if len(nums) != count:
            raise FormatError(f"{key} needs {count} values, got {len(nums)}", off)
        return nums

    dims = numbers("dims", int, 3)
    spacing = numbers("spacing", float, 3)
    origin = numbers("origin", float, 3)
    if fields["dtype"][0] != "float32":
        raise FormatError(f"unsupported dtype {fields['dtype'][0]!r}", fields["dtype"][1])
    if fields["byte_order"][0] != "little":
        raise FormatError(f"unsupported byte order {fields['byte_order'][0]!r}", fields["byte_order"][1])
    if min(dims) < 1:
        raise FormatError(f"invalid dims {dims}", fields["dims"][1])
    start = sep + 2
    payload = blob[start:]
    expected = dims[0] * dims[1] * dims[2] * 4
    if len(payload) != expected:
        raise FormatError(
            f"header declares {expected // 4} values but file holds {len(payload) / 4:g}",
            start + min(len(payload), expected),
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(dims, order="F").astype(np.float32)
    bad = ~np.isfinite(data)
    if bad.any():
        flat = int(np.flatnonzero(bad.ravel(order="F"))[0])
        raise FormatError("non-finite voxel value", start + 4 * flat)
    extra = {k: v for k, (v, _) in fields.items() if k not in HEADER_KEYS}
    return data, np.array(spacing), np.array(origin), extra


def save_volume(vol: Volume, path) -> None:
    write_raw(path, vol.data, vol.spacing, vol.origin, {"name": vol.name})


def load_volume(path) -> Volume:
    data, spacing, origin, extra = read_raw(path)
    return Volume(data, spacing, origin, name=extra.get("name", Path(path).stem))


# ---------------------------------------------------------------------------
# phantoms

PRIMITIVE_KINDS = ("sphere", "box", "cylinder")
_AXES = {"x": 0, "y": 1, "z": 2}


@dataclass(frozen=True)
class Primitive:
    """Solid with constant attenuation.

    ``size`` is ``(radius,)`` for a sphere, full edge lengths ``(lx, ly, lz)``
    for a box and ``(radius, length)`` for a cylinder aligned with ``axis``.
    """

    kind: str
    center: tuple
    size: tuple
    attenuation: float
    axis: str = "z"

    def half_extent(self) -> np.ndarray:
        if self.kind == "sphere":
            return np.full(3, self.size[0])
        if self.kind == "box":
            return 0.5 * np.asarray(self.size, dtype=float)
        h = np.full(3, float(self.size[0]))
        h[_AXES[self.axis]] = 0.5 * self.size[1]
        return h

    def contains(self, pts: np.ndarray) -> np.ndarray:
        rel = pts - np.asarray(self.center, dtype=float)
        if self.kind == "sphere":
            return np.einsum("...i,...i->...", rel, rel) <= self.size[0] ** 2
        if self.kind == "box":
            return np.all(np.abs(rel) <= 0.5 * np.asarray(self.size, dtype=float), axis=-1)
        a = _AXES[self.axis]
        others = [i for i in range(3) if i != a]
        radial = rel[..., others[0]] ** 2 + rel[..., others[1]] ** 2
        return (radial <= self.size[0] ** 2) & (np.abs(rel[..., a]) <= 0.5 * self.size[1])

    def to_dict(self) -> dict:
        d = {"type": self.kind, "center": list(self.center), "size": list(self.size),
             "attenuation": self.attenuation}
        if self.kind == "cylinder":
            d["axis"] = self.axis
        return d


@dataclass(frozen=True)
class PhantomSpec:
    primitives: tuple = ()
    dims: tuple = (64, 64, 64)
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple | None = None  # None centres the volume on (0, 0, 0)
    background: float = 0.0
    noise: float = 0.0
    seed: int = 0
    name: str = "phantom"

    def volume_origin(self) -> np.ndarray:
        if self.origin is not None:
            return np.asarray(self.origin, dtype=float)
        return -0.5 * np.asarray(self.dims) * np.asarray(self.spacing, dtype=float)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "origin": None if self.origin is None else list(self.origin),
            "background": self.background,
            "noise": self.noise,
            "seed": self.seed,
            "primitives": [p.to_dict() for p in self.primitives],
        }

    @classmethod
    def from_dict(cls, d: dict) -> PhantomSpec:
        known = {"name", "dims", "spacing", "origin", "background", "noise", "seed", "primitives"}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgumentError(f"unknown phantom keys: {sorted(unknown)}")
        prims = []
        for i, p in enumerate(d.get("primitives", [])):
            try:
                kind = p["type"]
                size = p["size"]
                size = tuple(float(s) for s in (size if isinstance(size, (list, tuple)) else [size]))
                prims.append(Primitive(kind, tuple(float(c) for c in p["center"]), size,
                                       float(p["attenuation"]), p.get("axis", "z")))
            except (KeyError, TypeError, ValueError) as exc:
                raise InvalidArgumentError(f"primitive {i}: {exc!r}") from None
        return cls(
            primitives=tuple(prims),
            dims=tuple(int(n) for n in d.get("dims", (64, 64, 64))),
            spacing=tuple(float(s) for s in d.get("spacing", (1.0, 1.0, 1.0))),
            origin=None if d.get("origin") is None else tuple(float(o) for o in d["origin"]),
            background=float(d.get("background", 0.0)),
            noise=float(d.get("noise", 0.0)),
            seed=int(d.get("seed", 0)),
            name=str(d.get("name", "phantom")),
        )

    @classmethod
    def from_json(cls, path) -> PhantomSpec:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _validate(spec: PhantomSpec) -> None:
    if len(spec.dims) != 3 or min(spec.dims) < 2:
        raise InvalidArgumentError("phantom dims must be 3 values >= 2")
    if len(spec.spacing) != 3 or min(spec.spacing) <= 0:
        raise InvalidArgumentError("phantom spacing must be 3 positive values")
    if spec.noise < 0:
        raise InvalidArgumentError("noise level must be >= 0")
    lo = spec.volume_origin()
    hi = lo + np.asarray(spec.dims) * np.asarray(spec.spacing)
    for i, p in enumerate(spec.primitives):
        if p.kind not in PRIMITIVE_KINDS:
            raise InvalidArgumentError(f"primitive {i}: unknown type {p.kind!r}")
        expected = {"sphere": 1, "box": 3, "cylinder": 2}[p.kind]
        if len(p.size) != expected or min(p.size) <= 0:
            raise InvalidArgumentError(f"primitive {i}: {p.kind} needs {expected} positive size values")
        if p.kind == "cylinder" and p.axis not in _AXES:
            raise InvalidArgumentError(f"primitive {i}: cylinder axis must be x, y or z")
        if p.attenuation < 0:
            raise InvalidArgumentError(f"primitive {i}: attenuation must be >= 0")
        c = np.asarray(p.center, dtype=float)
        if c.shape != (3,):
            raise InvalidArgumentError(f"primitive {i}: center must be a 3-vector")
        h = p.half_extent()
        if np.any(c - h < lo - 1e-9) or np.any(c + h > hi + 1e-9):
            raise InvalidArgumentError(f"primitive {i} ({p.kind}) extends outside the volume bounds")


def make_phantom(spec: PhantomSpec) -> Volume:
    """Rasterize primitives at voxel centres; overlapping attenuations add."""
    _validate(spec)
    origin = spec.volume_origin()
    sp = np.asarray(spec.spacing, dtype=float)
    axes = [origin[a] + (np.arange(spec.dims[a]) + 0.5) * sp[a] for a in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    data = np.full(spec.dims, spec.background, dtype=np.float64)
    for p in spec.primitives:
        data[p.contains(pts)] += p.attenuation
    if spec.noise > 0:
        rng = np.random.Generator(np.random.PCG64(spec.seed))
        data += spec.noise * rng.standard_normal(spec.dims)
    return Volume(data.astype(np.float32), sp, origin, name=spec.name)


def vertebra_stack_spec(dims=(128, 128, 128), spacing=(1.0, 1.0, 1.0), seed=0) -> PhantomSpec:
    """Five vertebra-like segments along z inside a faint soft-tissue cylinder.

    Each segment is a box (body), a cylinder along y (spinous process) and a
    cylinder along x (transverse processes). Sizes shrink towards the head so
    neighbouring segments are not interchangeable. Physical layout assumes a
    field of view of at least 128 mm per axis.
    """
    prims = [Primitive("cylinder", (0.0, 0.0, 0.0), (56.0, 124.0), 0.004, "z")]
    zs = (-48.0, -24.5, -1.5, 21.0, 43.0)
    for n, z in enumerate(zs):
        s = 1.0 - 0.07 * n
        h = 17.0 - 1.5 * n
        prims.append(Primitive("box", (0.0, -10.0, z), (34.0 * s, 26.0 * s, h), 0.030))
        prims.append(Primitive("cylinder", (0.0, 18.0 + 2 * n, z + 1.5), (3.5 * s, 26.0 - 2 * n), 0.045, "y"))
        prims.append(Primitive("cylinder", (3.0 * (n - 2), 6.0 + 1.5 * n, z - 2.0 + n), (2.0 + 0.5 * n, 62.0 * s), 0.040, "x"))
    return PhantomSpec(primitives=tuple(prims), dims=tuple(dims), spacing=tuple(spacing),
                       background=0.0, noise=0.0, seed=seed, name="vertebra-stack")


PRESETS = {"vertebra-stack": vertebra_stack_spec}


def sphere_phantom(radius=20.0, attenuation=0.02, dims=(64, 64, 64), spacing=(1.0, 1.0, 1.0),
                   center=(0.0, 0.0, 0.0)) -> Volume:
    spec = PhantomSpec(primitives=(Primitive("sphere", tuple(center), (radius,), attenuation),),
                       dims=tuple(dims), spacing=tuple(spacing), name="sphere")
    return make_phantom(spec)
