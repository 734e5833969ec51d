"""Self-supervised sample generation: DRR pairs with known relative pose.

A sample renders the fixed image at a base pose ``T_i`` (AP, LAT or a random
orientation about the isocentre) and draws the moving pose ``T_j`` by
perturbing ``T_i`` in the camera frame until the mTRE hits a uniform draw.
The registration target is ``T_hat = T_i T_j^-1``, i.e. ``T_hat @ T_j = T_i``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .augment import StyleAugmentation, apply, make_rng, sample_augmentation
from .contour import ContourPointSet, canny3d, contour_deviation
from .drr import BONE, REALISTIC, RenderStyle, render, save_image, write_pgm
from .errors import InvalidArgumentError, PPCRegError, SamplingError
from .evaluation import mtre
from .geometry import (
    ProjectionGeometry,
    RigidTransform,
    carm_geometry,
    compose,
    exp_motion,
    relative_transform,
    rotation_about,
)
from .volume import Volume, save_volume

SCHEMA_VERSION = 1
VIEWS = ("AP", "LAT", "random")
FIXED_STYLES = ("bone", "realistic", "augmented")
PERTURBATION_FRAME = "camera"
DEG_PER_MM = 1.0  # rotation:translation mixing of the perturbation direction


def view_transform(view: str, vol: Volume, rng: np.random.Generator | None = None) -> RigidTransform:
    """Base pose putting the volume centre at the isocentre.

    AP looks along the volume's +y axis, LAT along its +x axis (a 90 degree
    turn about z); ``random`` draws a uniform rotation from ``rng``.
    """
    if view == "AP":
        R = np.eye(3)
    elif view == "LAT":
        R = rotation_about((0, 0, 1), np.pi / 2).rotation
    elif view == "random":
        if rng is None:
            raise InvalidArgumentError("random view needs an rng")
        R = Rotation.random(random_state=rng).as_matrix()
    else:
        raise InvalidArgumentError(f"unknown view {view!r}")
    return RigidTransform(R, -R @ vol.center)


def perturbation(direction, magnitude: float) -> RigidTransform:
    """``exp_motion`` of ``magnitude`` along a (rotation deg, translation mm) direction."""
    u = np.asarray(direction, dtype=float)
    return exp_motion(np.r_[np.radians(DEG_PER_MM * magnitude * u[:3]), magnitude * u[3:]])


def random_direction(rng: np.random.Generator) -> np.ndarray:
    """Unit rotation axis and unit translation direction, mixed 1 deg : 1 mm."""
    axis = rng.standard_normal(3)
    trans = rng.standard_normal(3)
    return np.r_[axis / np.linalg.norm(axis), trans / np.linalg.norm(trans)]


def sample_initial_transform(
    rng: np.random.Generator,
    T_ref: RigidTransform,
    targets,
    mtre_range=(0.0, 30.0),
    tol: float = 1e-3,
) -> RigidTransform:
    """Perturb ``T_ref`` in the camera frame so that the mTRE is uniform in ``mtre_range``.

    ``targets`` are volume-frame points (array or ContourPointSet). The
    perturbation magnitude along a random direction is found by bisection.
    """
    pts = targets.points if isinstance(targets, ContourPointSet) else np.asarray(targets, dtype=float)
    pts = pts.reshape(-1, 3)
    lo, hi = (float(v) for v in mtre_range)
    if len(pts) == 0:
        raise InvalidArgumentError("at least one target point is required")
    if lo < 0 or hi < lo:
        raise InvalidArgumentError("mtre_range must satisfy 0 <= lo <= hi")
    target = rng.uniform(lo, hi) if hi > lo else lo
    u = random_direction(rng)
    if target == 0:
        return T_ref

    def err(m):
        return mtre(T_ref, compose(perturbation(u, m), T_ref), pts)

    a, b = 0.0, max(target, 1.0)
    for _ in range(40):
        if err(b) >= target:
            break
        a, b = b, 2.0 * b
    else:
        raise SamplingError(f"could not reach an mTRE of {target:.3f} mm")
    for _ in range(200):
        m = 0.5 * (a + b)
        e = err(m)
        if abs(e - target) < tol:
            return compose(perturbation(u, m), T_ref)
        if e < target:
            a = m
        else:
            b = m
    raise SamplingError(f"bisection did not converge to mTRE {target:.3f} mm")


@dataclass(frozen=True)
class DatasetConfig:
    n_samples: int = 1
    views: tuple = VIEWS
    styles: tuple = ("bone",)
    mtre_range: tuple = (0.0, 30.0)
    seed: int = 0
    source_isocenter: float = 750.0
    source_detector: float = 1200.0
    detector_size: tuple = (256, 256)
    pixel_spacing: tuple = (1.2, 1.2)
    bone_threshold: float = BONE.threshold
    render_moving: bool = True
    target_mode: str = "contour"  # or "corners"
    max_targets: int = 256
    angle_tol: float = 20.0
    canny_sigma: float = 1.0
    canny_low: float = 0.0025
    canny_high: float = 0.005

    def __post_init__(self):
        object.__setattr__(self, "views", tuple(self.views))
        object.__setattr__(self, "styles", tuple(self.styles))
        object.__setattr__(self, "mtre_range", tuple(float(v) for v in self.mtre_range))
        object.__setattr__(self, "detector_size", tuple(int(v) for v in self.detector_size))
        object.__setattr__(self, "pixel_spacing", tuple(float(v) for v in self.pixel_spacing))
        if self.n_samples < 1:
            raise InvalidArgumentError("n_samples must be >= 1")
        if not self.views or any(v not in VIEWS for v in self.views):
            raise InvalidArgumentError(f"views must be a non-empty subset of {VIEWS}")
        if not self.styles or any(s not in FIXED_STYLES for s in self.styles):
            raise InvalidArgumentError(f"styles must be a non-empty subset of {FIXED_STYLES}")
        lo, hi = self.mtre_range
        if len(self.mtre_range) != 2 or lo < 0 or hi < lo:
            raise InvalidArgumentError("mtre_range must be [lo, hi] with 0 <= lo <= hi")
        if self.target_mode not in ("contour", "corners"):
            raise InvalidArgumentError("target_mode must be 'contour' or 'corners'")

    def geometry(self) -> ProjectionGeometry:
        return carm_geometry(self.source_isocenter, self.source_detector, self.detector_size,
                             self.pixel_spacing)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> DatasetConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgumentError(f"unknown dataset config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SampleRecord:
    sample_id: str
    volume_id: str
    view: str
    T_i: RigidTransform
    T_j: RigidTransform
    T_hat: RigidTransform
    mtre_init: float
    fixed_style: str
    augmentation: StyleAugmentation | None
    moving_style: str
    target_indices: list | None  # into the volume's contour file; None for corner targets
    files: dict = field(default_factory=dict)
    seed: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "volume_id": self.volume_id,
            "view": self.view,
            "T_i": self.T_i.to_list(),
            "T_j": self.T_j.to_list(),
            "T_hat": self.T_hat.to_list(),
            "mtre_init_mm": self.mtre_init,
            "fixed_style": self.fixed_style,
            "augmentation": None if self.augmentation is None else self.augmentation.to_dict(),
            "moving_style": self.moving_style,
            "target_indices": self.target_indices,
            "files": dict(self.files),
            "seed": list(self.seed),
        }

    @classmethod
    def from_dict(cls, d: dict) -> SampleRecord:
        aug = d.get("augmentation")
        return cls(
            d["sample_id"], d["volume_id"], d["view"],
            RigidTransform.from_matrix(d["T_i"]), RigidTransform.from_matrix(d["T_j"]),
            RigidTransform.from_matrix(d["T_hat"]), float(d["mtre_init_mm"]), d["fixed_style"],
            None if aug is None else StyleAugmentation.from_dict(aug), d["moving_style"],
            d.get("target_indices"), dict(d.get("files", {})), list(d.get("seed", [])),
        )


@dataclass
class VolumeEntry:
    volume: Volume
    contours: ContourPointSet
    volume_file: str
    contour_file: str


def sample_targets(entry: VolumeEntry, T_gt: RigidTransform, geom: ProjectionGeometry,
                   cfg: DatasetConfig, key) -> tuple[np.ndarray, list | None]:
    """Target points of a sample: apparent contour at the true pose, or box corners."""
    if cfg.target_mode == "corners":
        return entry.volume.corners(), None
    pts = entry.contours
    dev = contour_deviation(T_gt.apply(pts.points), T_gt.apply_vector(pts.gradients), geom.source)
    idx = np.flatnonzero(dev <= cfg.angle_tol)
    if len(idx) > cfg.max_targets:
        idx = np.sort(make_rng(*key, 2).choice(idx, size=cfg.max_targets, replace=False))
    return pts.points[idx], [int(i) for i in idx]


def record_targets(record: SampleRecord, entry_points, volume: Volume) -> np.ndarray:
    """Volume-frame targets of a manifest record."""
    if record.target_indices is None:
        return volume.corners()
    return np.asarray(entry_points)[np.asarray(record.target_indices, dtype=int)]


def _volume_ids(volumes) -> list[str]:
    ids = []
    for k, v in enumerate(volumes):
        base = "".join(c if c.isalnum() or c in "-_" else "_" for c in (v.name or "")) or f"vol{k}"
        name, n = base, 1
        while name in ids:
            name, n = f"{base}_{n}", n + 1
        ids.append(name)
    return ids


def generate_sample(index: int, entry: VolumeEntry, volume_id: str, cfg: DatasetConfig,
                    out_dir: Path) -> SampleRecord:
    sid = f"s{index:05d}"
    key = (cfg.seed, index)
    rng = make_rng(*key)
    geom = cfg.geometry()
    view = cfg.views[int(rng.integers(len(cfg.views)))]
    style = cfg.styles[int(rng.integers(len(cfg.styles)))]
    T_i = view_transform(view, entry.volume, rng)
    targets, target_idx = sample_targets(entry, T_i, geom, cfg, key)
    if len(targets) == 0:
        raise SamplingError("no apparent-contour targets at the ground-truth pose")
    T_j = sample_initial_transform(rng, T_i, targets, cfg.mtre_range)

    bone = RenderStyle("bone", cfg.bone_threshold)
    fixed = render(entry.volume, geom, T_i, REALISTIC if style == "realistic" else bone)
    aug = None
    if style == "augmented":
        aug = sample_augmentation((cfg.seed, index, 1))
        fixed = apply(fixed, aug)
    files = {"fixed": f"samples/{sid}_fixed.img", "fixed_pgm": f"samples/{sid}_fixed.pgm"}
    save_image(fixed, out_dir / files["fixed"])
    write_pgm(out_dir / files["fixed_pgm"], fixed.data)
    if cfg.render_moving:
        files["moving"] = f"samples/{sid}_moving.img"
        save_image(render(entry.volume, geom, T_j, bone), out_dir / files["moving"])
    files["volume"] = entry.volume_file
    files["contours"] = entry.contour_file
    return SampleRecord(sid, volume_id, view, T_i, T_j, relative_transform(T_i, T_j),
                        mtre(T_i, T_j, targets), style, aug, "bone", target_idx, files, list(key))


def generate_dataset(volumes, config: DatasetConfig, out_dir) -> dict:
    """Render ``config.n_samples`` samples and write ``manifest.json`` under ``out_dir``.

    Each sample draws from its own PCG64 stream keyed by ``(seed, index)``,
    so samples are independent of generation order and thread count.
    """
    volumes = list(volumes)
    if not volumes:
        raise InvalidArgumentError("at least one volume is required")
    out = Path(out_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    ids = _volume_ids(volumes)
    entries = []
    for vid, vol in zip(ids, volumes):
        vf, cf = f"volumes/{vid}.vol", f"volumes/{vid}_contours.csv"
        save_volume(vol, out / vf)
        cs = canny3d(vol, config.canny_sigma, config.canny_low, config.canny_high)
        cs.to_csv(out / cf)
        # reload so targets use exactly the stored (text round-tripped) values
        entries.append(VolumeEntry(vol, ContourPointSet.from_csv(out / cf, vid), vf, cf))

    records = []
    for index in range(config.n_samples):
        k = int(make_rng(config.seed, index, 0).integers(len(volumes)))
        try:
            records.append(generate_sample(index, entries[k], ids[k], config, out))
        except (OSError, PPCRegError) as exc:
            raise type(exc)(f"sample s{index:05d}: {exc}") from exc

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "perturbation_frame": PERTURBATION_FRAME,
        "perturbation_mixing_deg_per_mm": DEG_PER_MM,
        "config": config.to_dict(),
        "geometry": config.geometry().to_dict(),
        "volumes": [{"volume_id": vid, "file": e.volume_file, "contours": e.contour_file,
                     "checksum": e.volume.checksum()} for vid, e in zip(ids, entries)],
        "samples": [r.to_dict() for r in records],
    }
    write_manifest(manifest, out / "manifest.json")
    return manifest


def write_manifest(manifest: dict, path) -> None:
    Path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_manifest(path) -> tuple[dict, list[SampleRecord]]:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise InvalidArgumentError(f"unsupported manifest schema {doc.get('schema_version')!r}")
    return doc, [SampleRecord.from_dict(s) for s in doc["samples"]]
