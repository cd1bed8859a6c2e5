"""Parametric reinforced-concrete target volumes and ground-truth voxel labels.

The target is a 1 m^3 concrete block centered at the origin, reinforced by a
7x7 grid of vertical steel bars (radius 15 mm, pitch 150 mm).  Defects are
modelled as modifications of that cage:

    honeycombing  - seeded removal of a fraction (default 40%) of the bars
    shear         - removal of a 3-wide diagonal band of bars (19 slots)
    corrosion     - removal of one seeded 3x3 corner block (9 slots)
    delamination  - a thin horizontal air slab (default 18 mm) at fixed z

Removed bars leave air-filled cylinders; the delamination slab is air.  The
rebar cage itself survives every defect except where bars are removed.

Ground truth lives on a 20^3 grid of 50 mm voxels.  Voxel (i, j, k) owns the
half-open cube [-500 + 50*i, -450 + 50*i) x ... and is labelled by sampling
the material at its minimum-corner lattice point (-500 + 50*i, ...).  That
lattice coincides with the bar axes (multiples of 150 mm) and the default
delamination mid-plane (z = 0), so each 30 mm bar maps to exactly one voxel
column and the default slab to exactly one voxel layer; sampling at geometric
voxel centers (odd multiples of 25 mm) would miss every bar and the slab
entirely at this grid pitch.

Label codes: 0 concrete, 1 honeycombing, 2 shear, 3 corrosion,
4 delamination, 5 rebar.
"""

from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EXTENT_HALF_MM = 500.0
GRID_N = 20
VOXEL_PITCH_MM = 50.0

BAR_RADIUS_MM = 15.0
BAR_SPACING_MM = 150.0
CAGE_SLOTS = 7

DELAMINATION_THICKNESS_MM = 18.0
DELAMINATION_Z_MM = 0.0

LABEL_CONCRETE = 0
LABEL_HONEYCOMBING = 1
LABEL_SHEAR = 2
LABEL_CORROSION = 3
LABEL_DELAMINATION = 4
LABEL_REBAR = 5
N_CLASSES = 6

CLASS_NAMES = ("concrete", "honeycombing", "shear", "corrosion",
               "delamination", "rebar")

_MVLB_MAGIC = b"MVLB"
_MVLB_VERSION = 1


class GeometryError(ValueError):
    """Raised for invalid geometric configurations."""


class MaterialKind(enum.Enum):
    AIR = "air"
    CONCRETE = "concrete"
    STEEL = "steel"


@dataclass(frozen=True)
class Material:
    """Bulk material constants.

    density is g/cm^3, z_eff is the effective atomic number, and
    radiation_length is in mm.
    """

    kind: MaterialKind
    density: float
    z_eff: float
    radiation_length: float

    def __post_init__(self):
        if self.density <= 0 or self.radiation_length <= 0:
            raise GeometryError(f"non-physical material: {self}")


AIR = Material(MaterialKind.AIR, density=1.205e-3, z_eff=7.3,
               radiation_length=3.04e5)
CONCRETE = Material(MaterialKind.CONCRETE, density=2.3, z_eff=11.0,
                    radiation_length=107.0)
STEEL = Material(MaterialKind.STEEL, density=7.87, z_eff=26.0,
                 radiation_length=17.6)

MATERIALS = {m.kind: m for m in (AIR, CONCRETE, STEEL)}


class DefectClass(enum.Enum):
    HEALTHY = "healthy"
    HONEYCOMBING = "honeycombing"
    SHEAR = "shear"
    CORROSION = "corrosion"
    DELAMINATION = "delamination"

    @property
    def label_code(self) -> int:
        """Voxel label code for this defect (healthy has none)."""
        return {
            DefectClass.HONEYCOMBING: LABEL_HONEYCOMBING,
            DefectClass.SHEAR: LABEL_SHEAR,
            DefectClass.CORROSION: LABEL_CORROSION,
            DefectClass.DELAMINATION: LABEL_DELAMINATION,
        }[self]


@dataclass(frozen=True)
class DefectSpec:
    """What to carve out of a healthy volume, and with which seed."""

    defect: DefectClass
    seed: int = 0
    honeycombing_fraction: float = 0.4
    delamination_z: float = DELAMINATION_Z_MM
    delamination_thickness: float = DELAMINATION_THICKNESS_MM


@dataclass(frozen=True)
class RebarCage:
    """7x7 grid of vertical (z-axis) steel bars.

    Slot (row, col) has its axis at x = -3*spacing + col*spacing,
    y = -3*spacing + row*spacing; bars span the full z extent of the target.
    """

    radius: float = BAR_RADIUS_MM
    spacing: float = BAR_SPACING_MM
    present: np.ndarray = field(
        default_factory=lambda: np.ones((CAGE_SLOTS, CAGE_SLOTS), dtype=bool))

    def __post_init__(self):
        p = np.asarray(self.present, dtype=bool)
        if p.shape != (CAGE_SLOTS, CAGE_SLOTS):
            raise GeometryError(f"cage needs {CAGE_SLOTS}x{CAGE_SLOTS} slots")
        p.flags.writeable = False
        object.__setattr__(self, "present", p)

    def slot_center(self, row: int, col: int) -> tuple[float, float]:
        off = (CAGE_SLOTS - 1) / 2.0 * self.spacing
        return (-off + col * self.spacing, -off + row * self.spacing)

    @property
    def n_present(self) -> int:
        return int(self.present.sum())


def build_healthy_cage(radius: float = BAR_RADIUS_MM,
                       spacing: float = BAR_SPACING_MM) -> RebarCage:
    """All 49 bars present, centered on the origin.

    Raises GeometryError when the cage does not fit inside the 1 m extent,
    i.e. when 6*spacing + 2*radius exceeds 1000 mm.
    """
    if radius <= 0:
        raise GeometryError("bar radius must be positive")
    width = (CAGE_SLOTS - 1) * spacing + 2 * radius
    if width > 2 * EXTENT_HALF_MM:
        raise GeometryError(
            f"cage width {width:.1f} mm exceeds the {2 * EXTENT_HALF_MM:.0f} mm extent")
    return RebarCage(radius=radius, spacing=spacing)


@dataclass(frozen=True)
class VolumeGeometry:
    """Immutable target description: cage + defect + removed-bar set.

    removed_bars is empty for healthy and delamination volumes.  fill is the
    bulk material outside bars (concrete for real targets; uniform test
    volumes swap in air or steel).
    """

    cage: RebarCage
    defect: DefectClass
    seed: int
    removed_bars: frozenset[tuple[int, int]] = frozenset()
    delamination: tuple[float, float] | None = None  # (z_center, thickness)
    fill: Material = CONCRETE

    def __post_init__(self):
        for (r, c) in self.removed_bars:
            if not (0 <= r < CAGE_SLOTS and 0 <= c < CAGE_SLOTS):
                raise GeometryError(f"removed bar {(r, c)} outside cage")
        if self.delamination is not None:
            zc, t = self.delamination
            if not (-EXTENT_HALF_MM < zc - t / 2 and zc + t / 2 < EXTENT_HALF_MM):
                raise GeometryError("delamination slab outside target extent")

    @classmethod
    def uniform(cls, material: Material) -> "VolumeGeometry":
        """Bar-free volume filled with one material (transport test target)."""
        cage = RebarCage(present=np.zeros((CAGE_SLOTS, CAGE_SLOTS), dtype=bool))
        return cls(cage=cage, defect=DefectClass.HEALTHY, seed=0, fill=material)

    def to_manifest(self) -> dict:
        delam = None
        if self.delamination is not None:
            delam = {"z_center": self.delamination[0],
                     "thickness": self.delamination[1]}
        return {
            "class": self.defect.value,
            "seed": self.seed,
            "removed_bars": sorted([list(rc) for rc in self.removed_bars]),
            "delamination": delam,
        }

    @classmethod
    def from_manifest(cls, manifest: dict) -> "VolumeGeometry":
        defect = DefectClass(manifest["class"])
        removed = frozenset((int(r), int(c)) for r, c in manifest["removed_bars"])
        present = np.ones((CAGE_SLOTS, CAGE_SLOTS), dtype=bool)
        for (r, c) in removed:
            present[r, c] = False
        delam = None
        if manifest.get("delamination"):
            d = manifest["delamination"]
            delam = (float(d["z_center"]), float(d["thickness"]))
        return cls(cage=RebarCage(present=present), defect=defect,
                   seed=int(manifest["seed"]), removed_bars=removed,
                   delamination=delam)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _remove_bars(cage: RebarCage, removed: frozenset[tuple[int, int]],
                 defect: DefectClass, seed: int) -> VolumeGeometry:
    present = cage.present.copy()
    for (r, c) in removed:
        present[r, c] = False
    new_cage = RebarCage(radius=cage.radius, spacing=cage.spacing,
                         present=present)
    return VolumeGeometry(cage=new_cage, defect=defect, seed=seed,
                          removed_bars=removed)


def apply_honeycombing(cage: RebarCage, fraction: float, seed: int) -> VolumeGeometry:
    """Remove round-half-up(fraction * 49) bars, seeded uniform w/o replacement."""
    if not 0.0 < fraction < 1.0:
        raise GeometryError(f"honeycombing fraction must lie in (0, 1), got {fraction}")
    n_slots = CAGE_SLOTS * CAGE_SLOTS
    n_remove = _round_half_up(fraction * n_slots)
    rng = np.random.Generator(np.random.Philox(seed))
    chosen = rng.choice(n_slots, size=n_remove, replace=False)
    removed = frozenset((int(i) // CAGE_SLOTS, int(i) % CAGE_SLOTS) for i in chosen)
    return _remove_bars(cage, removed, DefectClass.HONEYCOMBING, seed)


def apply_shear(cage: RebarCage, seed: int) -> VolumeGeometry:
    """Remove the 3-wide main-diagonal band |row - col| <= 1 (19 slots).

    Deterministic; the seed is carried only for provenance and future
    randomized variants.
    """
    removed = frozenset((r, c)
                        for r in range(CAGE_SLOTS)
                        for c in range(CAGE_SLOTS) if abs(r - c) <= 1)
    return _remove_bars(cage, removed, DefectClass.SHEAR, seed)


CORROSION_CORNERS = ((0, 0), (0, 4), (4, 0), (4, 4))  # (row0, col0) of each 3x3 block


def apply_corrosion(cage: RebarCage, seed: int) -> VolumeGeometry:
    """Remove one seeded 3x3 corner block (9 bars)."""
    rng = np.random.Generator(np.random.Philox(seed))
    r0, c0 = CORROSION_CORNERS[int(rng.integers(4))]
    removed = frozenset((r0 + dr, c0 + dc) for dr in range(3) for dc in range(3))
    return _remove_bars(cage, removed, DefectClass.CORROSION, seed)


def apply_delamination(cage: RebarCage, seed: int,
                       z_center: float = DELAMINATION_Z_MM,
                       thickness: float = DELAMINATION_THICKNESS_MM) -> VolumeGeometry:
    """Insert a horizontal air slab [z_center - t/2, z_center + t/2]; cage intact."""
    return VolumeGeometry(cage=cage, defect=DefectClass.DELAMINATION, seed=seed,
                          delamination=(z_center, thickness))


def build_volume(spec: DefectSpec) -> VolumeGeometry:
    """Build the target volume for one defect specification."""
    cage = build_healthy_cage()
    if spec.defect is DefectClass.HEALTHY:
        return VolumeGeometry(cage=cage, defect=DefectClass.HEALTHY, seed=spec.seed)
    if spec.defect is DefectClass.HONEYCOMBING:
        return apply_honeycombing(cage, spec.honeycombing_fraction, spec.seed)
    if spec.defect is DefectClass.SHEAR:
        return apply_shear(cage, spec.seed)
    if spec.defect is DefectClass.CORROSION:
        return apply_corrosion(cage, spec.seed)
    if spec.defect is DefectClass.DELAMINATION:
        return apply_delamination(cage, spec.seed, spec.delamination_z,
                                  spec.delamination_thickness)
    raise GeometryError(f"unknown defect {spec.defect}")


def _bar_slot_at(geom: VolumeGeometry, x: float, y: float) -> tuple[int, int] | None:
    """Cage slot whose cylinder contains (x, y), or None."""
    cage = geom.cage
    off = (CAGE_SLOTS - 1) / 2.0 * cage.spacing
    col = int(round((x + off) / cage.spacing))
    row = int(round((y + off) / cage.spacing))
    if not (0 <= row < CAGE_SLOTS and 0 <= col < CAGE_SLOTS):
        return None
    cx, cy = cage.slot_center(row, col)
    if (x - cx) ** 2 + (y - cy) ** 2 <= cage.radius ** 2:
        return (row, col)
    return None


def region_at(geom: VolumeGeometry, x: float, y: float, z: float
              ) -> tuple[Material, int]:
    """(material, label code) at a point, applying the precedence rules.

    Steel in a present bar wins over the delamination slab; removed-bar
    cylinders and the slab are air; everything else inside the extent is the
    fill material; outside the extent is air.  The label code is what
    rasterization would assign at this point.
    """
    h = EXTENT_HALF_MM
    if not (-h <= x <= h and -h <= y <= h and -h <= z <= h):
        return AIR, LABEL_CONCRETE
    slot = _bar_slot_at(geom, x, y)
    if slot is not None:
        if geom.cage.present[slot]:
            return STEEL, LABEL_REBAR
        if slot in geom.removed_bars:
            return AIR, geom.defect.label_code
    if geom.delamination is not None:
        zc, t = geom.delamination
        if zc - t / 2 <= z <= zc + t / 2:
            return AIR, LABEL_DELAMINATION
    return geom.fill, LABEL_CONCRETE


def material_at(geom: VolumeGeometry, x: float, y: float, z: float) -> Material:
    """Material query used by transport stepping."""
    return region_at(geom, x, y, z)[0]


def sample_point(i: int, j: int, k: int) -> tuple[float, float, float]:
    """Labelling lattice point of voxel (i, j, k); see module docstring."""
    return (-EXTENT_HALF_MM + VOXEL_PITCH_MM * i,
            -EXTENT_HALF_MM + VOXEL_PITCH_MM * j,
            -EXTENT_HALF_MM + VOXEL_PITCH_MM * k)


def point_to_voxel(x: float, y: float, z: float) -> tuple[int, int, int] | None:
    """Voxel owning a point, or None when outside the grid."""
    ix = math.floor((x + EXTENT_HALF_MM) / VOXEL_PITCH_MM)
    iy = math.floor((y + EXTENT_HALF_MM) / VOXEL_PITCH_MM)
    iz = math.floor((z + EXTENT_HALF_MM) / VOXEL_PITCH_MM)
    if 0 <= ix < GRID_N and 0 <= iy < GRID_N and 0 <= iz < GRID_N:
        return (int(ix), int(iy), int(iz))
    return None


@dataclass(frozen=True)
class LabelGrid:
    """20^3 array of class codes in {0..5}, indexed [ix, iy, iz]."""

    values: np.ndarray
    voxel_pitch: float = VOXEL_PITCH_MM

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.uint8)
        if v.shape != (GRID_N, GRID_N, GRID_N):
            raise GeometryError(f"label grid must be {GRID_N}^3, got {v.shape}")
        if v.max(initial=0) >= N_CLASSES:
            raise GeometryError("label code outside {0..5}")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.values.ravel(), minlength=N_CLASSES)

    def save(self, path: str | Path) -> None:
        """Binary layout: 'MVLB', u32 version, u32 dims[3], then 8000 bytes
        in x-fastest order (index = x + 20*y + 400*z), little-endian."""
        with open(path, "wb") as fh:
            fh.write(_MVLB_MAGIC)
            fh.write(struct.pack("<4I", _MVLB_VERSION, GRID_N, GRID_N, GRID_N))
            fh.write(self.values.ravel(order="F").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "LabelGrid":
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != _MVLB_MAGIC:
                raise GeometryError(f"bad label-grid magic {magic!r} in {path}")
            version, nx, ny, nz = struct.unpack("<4I", fh.read(16))
            if version != _MVLB_VERSION:
                raise GeometryError(f"unsupported label-grid version {version}")
            if (nx, ny, nz) != (GRID_N, GRID_N, GRID_N):
                raise GeometryError(f"unexpected label-grid dims {(nx, ny, nz)}")
            body = fh.read(nx * ny * nz)
        values = np.frombuffer(body, dtype=np.uint8).reshape(
            (nx, ny, nz), order="F")
        return cls(values=values.copy())


def rasterize_labels(geom: VolumeGeometry) -> LabelGrid:
    """Label every voxel by the material/defect region at its lattice point."""
    values = np.zeros((GRID_N, GRID_N, GRID_N), dtype=np.uint8)
    # Bars and removed cylinders are z-invariant: resolve the (x, y) column
    # class once, then paint columns; the slab overrides concrete columns only.
    col_label = np.zeros((GRID_N, GRID_N), dtype=np.uint8)
    for i in range(GRID_N):
        for j in range(GRID_N):
            x, y, _ = sample_point(i, j, 0)
            slot = _bar_slot_at(geom, x, y)
            if slot is not None:
                if geom.cage.present[slot]:
                    col_label[i, j] = LABEL_REBAR
                elif slot in geom.removed_bars:
                    col_label[i, j] = geom.defect.label_code
    values[:] = col_label[:, :, None]
    if geom.delamination is not None:
        zc, t = geom.delamination
        for k in range(GRID_N):
            z = sample_point(0, 0, k)[2]
            if zc - t / 2 <= z <= zc + t / 2:
                layer = values[:, :, k]
                layer[col_label == LABEL_CONCRETE] = LABEL_DELAMINATION
    return LabelGrid(values=values)


def save_manifest(geom: VolumeGeometry, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(geom.to_manifest(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(path: str | Path) -> VolumeGeometry:
    with open(path) as fh:
        return VolumeGeometry.from_manifest(json.load(fh))
