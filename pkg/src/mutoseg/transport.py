"""Simplified muon Monte Carlo replacing a full cascade simulation.

The model keeps exactly the observables the downstream features consume:

    * multiple Coulomb scattering: per material segment, two independent
      Gaussian projected kicks with sigma from the Highland formula, applied
      at the segment midpoint (straight flight to the midpoint, kick, straight
      flight to the segment end).  A homogeneous slab is a single segment, so
      the empirical exit-angle RMS reproduces the closed form exactly.
    * continuous energy loss dE/dx per segment, no straggling; a muon whose
      kinetic energy runs out stops and produces no further hits.
    * secondary production: a Poisson count per segment with mean
      rate * z_eff * density * path_length, accumulated along the in-target
      path and emitted at the target exit.  Each secondary lands on exactly
      one detector plane - on the lower station with probability
      (1 - albedo_fraction), otherwise on the upper station (backscatter) -
      Gaussian-smeared around the primary's crossing of that plane.  The
      albedo keeps the upper-plane shower channels statistically alive.

Geometry is probed along the current flight direction in 10 mm z steps
inside the target; consecutive equal-material steps merge into one segment,
so material boundaries are resolved to the probe step.  All randomness for
event ``i`` of a volume comes from a counter-based Philox stream keyed by
(volume_seed, i), which makes events reproducible independently of execution
order.  Draw order within an event: gun x, gun y, then per segment
[kick_x, kick_y, n_secondaries], one Exp(edep) per primary plane crossing,
then per secondary [station, plane, dx, dy, species, edep, dt].

Units: mm, MeV, ns throughout.  Beam "energy" is interpreted as the beam
momentum in GeV/c (at these momenta E and pc differ by well under 1%).
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (
    AIR,
    CONCRETE,
    EXTENT_HALF_MM,
    STEEL,
    DefectSpec,
    LabelGrid,
    Material,
    MaterialKind,
    VolumeGeometry,
    build_volume,
    material_at,
    rasterize_labels,
    save_manifest,
)

MUON_MASS_MEV = 105.6583755
C_MM_PER_NS = 299.792458
HIGHLAND_MEV = 13.6

PROBE_STEP_MM = 10.0

_U64 = np.uint64(0xFFFFFFFFFFFFFFFF)


class TransportError(RuntimeError):
    """Raised for invalid transport configurations."""


class Species(enum.Enum):
    MUON = "mu"
    ELECTRON = "e-"
    POSITRON = "e+"
    GAMMA = "gamma"


@dataclass(frozen=True)
class BeamSpec:
    """Mono-energetic vertical muon gun.

    energy_gev is the beam momentum in GeV/c; muons start at z = gun_z with
    direction (0, 0, -1) and (x, y) uniform over a square of the given
    half-width.
    """

    energy_gev: float = 4.0
    gun_z: float = 2500.0
    xy_half_width: float = 500.0
    events_per_volume: int = 5000

    @property
    def momentum_mev(self) -> float:
        return self.energy_gev * 1000.0


@dataclass(frozen=True)
class DetectorLayout:
    """Six horizontal tracking planes: three above, three below the target."""

    plane_z: tuple[float, ...] = (750.0, 650.0, 550.0, -550.0, -650.0, -750.0)
    half_extent: float = 1000.0

    def __post_init__(self):
        if len(self.plane_z) != 6:
            raise TransportError("exactly six detector planes required")
        upper, lower = self.plane_z[:3], self.plane_z[3:]
        if not all(z > EXTENT_HALF_MM for z in upper):
            raise TransportError("upper planes must sit above the target")
        if not all(z < -EXTENT_HALF_MM for z in lower):
            raise TransportError("lower planes must sit below the target")

    @property
    def upper_ids(self) -> tuple[int, int, int]:
        return (0, 1, 2)

    @property
    def lower_ids(self) -> tuple[int, int, int]:
        return (3, 4, 5)


@dataclass(frozen=True)
class PhysicsTable:
    """Free constants of the simplified model.

    dedx is MeV/mm per material kind; secondary_rate_per_mm is the expected
    number of secondaries per mm of path per unit (z_eff * density).  The
    emission constants (species probabilities, spatial/time smearing, energy
    scales, albedo fraction) are calibration constants of the model, not
    measured quantities.
    """

    dedx_mev_per_mm: dict = field(default_factory=lambda: {
        MaterialKind.AIR: 2.2e-4,
        MaterialKind.CONCRETE: 0.46,
        MaterialKind.STEEL: 1.57,
    })
    highland_mev: float = HIGHLAND_MEV
    secondary_rate_per_mm: float = 2.0e-4
    species_probs: tuple[float, float, float] = (0.55, 0.35, 0.10)  # e-, gamma, e+
    secondary_sigma_xy_mm: float = 30.0
    secondary_edep_mean_mev: float = 2.0
    secondary_time_sigma_ns: float = 0.5
    albedo_fraction: float = 0.08
    primary_edep_mean_mev: float = 1.5

    def __post_init__(self):
        d = self.dedx_mev_per_mm
        if not (d[MaterialKind.STEEL] > d[MaterialKind.CONCRETE]
                > d[MaterialKind.AIR] > 0):
            raise TransportError("dE/dx ordering steel > concrete > air violated")
        if abs(sum(self.species_probs) - 1.0) > 1e-12:
            raise TransportError("species probabilities must sum to 1")

    def dedx(self, material: Material) -> float:
        return self.dedx_mev_per_mm[material.kind]

    def secondary_rate(self, material: Material) -> float:
        """Expected secondaries per mm of path in this material."""
        return self.secondary_rate_per_mm * material.z_eff * material.density


@dataclass(frozen=True)
class PlaneHit:
    plane_id: int
    x: float
    y: float
    z: float
    species: Species
    edep_mev: float
    time_ns: float
    track_id: int  # 1 = primary muon, > 1 = secondaries


@dataclass(frozen=True)
class SegmentRecord:
    """One traversed material segment (diagnostics / energy bookkeeping)."""

    z_start: float
    z_end: float
    material: MaterialKind
    path_length: float


@dataclass
class EventRecord:
    event_id: int
    hits: list
    true_energy_loss_mev: float
    primary_path: list  # list[SegmentRecord]
    n_secondaries: int
    stopped: bool


def highland_theta0(momentum_mev: float, step_mm: float,
                    material: Material,
                    highland_mev: float = HIGHLAND_MEV) -> float:
    """RMS projected multiple-scattering angle for one material step.

    theta0 = (k / (beta c p)) * sqrt(x / X0) * (1 + 0.038 ln(x / X0)),
    with the logarithmic bracket clamped at zero for very thin steps.
    """
    if momentum_mev <= 0:
        raise TransportError("momentum must be positive")
    if step_mm < 0:
        raise TransportError("step length must be non-negative")
    if step_mm == 0:
        return 0.0
    ratio = step_mm / material.radiation_length
    beta = momentum_mev / math.hypot(momentum_mev, MUON_MASS_MEV)
    bracket = max(0.0, 1.0 + 0.038 * math.log(ratio))
    return highland_mev / (beta * momentum_mev) * math.sqrt(ratio) * bracket


def _event_rng(volume_seed: int, event_index: int) -> np.random.Generator:
    """Counter-based substream for one event; independent of run order."""
    key = np.array([np.uint64(volume_seed) & _U64,
                    np.uint64(event_index) & _U64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


class _MuonState:
    """Mutable propagation state: position, slopes w.r.t. -z, total energy."""

    __slots__ = ("x", "y", "z", "tx", "ty", "e_total", "time", "alive")

    def __init__(self, x, y, z, momentum_mev):
        self.x = x
        self.y = y
        self.z = z
        self.tx = 0.0  # dx per unit of downward z travel
        self.ty = 0.0
        self.e_total = math.hypot(momentum_mev, MUON_MASS_MEV)
        self.time = 0.0
        self.alive = True

    @property
    def kinetic(self) -> float:
        return self.e_total - MUON_MASS_MEV

    @property
    def momentum(self) -> float:
        return math.sqrt(max(self.e_total ** 2 - MUON_MASS_MEV ** 2, 0.0))

    @property
    def beta(self) -> float:
        return self.momentum / self.e_total

    @property
    def sec(self) -> float:
        """Path length per unit of downward z travel."""
        return math.sqrt(1.0 + self.tx ** 2 + self.ty ** 2)


def propagate_event(geom: VolumeGeometry, beam: BeamSpec,
                    layout: DetectorLayout, table: PhysicsTable,
                    volume_seed: int, event_index: int) -> EventRecord:
    """Transport one muon from the gun to below the lowest plane."""
    rng = _event_rng(volume_seed, event_index)
    x0 = rng.uniform(-beam.xy_half_width, beam.xy_half_width)
    y0 = rng.uniform(-beam.xy_half_width, beam.xy_half_width)
    st = _MuonState(x0, y0, beam.gun_z, beam.momentum_mev)

    hits: list[PlaneHit] = []
    crossings: dict[int, tuple[float, float, float]] = {}  # plane -> (x, y, t)
    path: list[SegmentRecord] = []
    energy_loss = 0.0
    n_secondaries = 0
    z_floor = min(layout.plane_z) - 1.0

    def fly_straight(z_to: float) -> None:
        """Advance to z_to on the current slopes, recording plane crossings."""
        beta = st.beta
        for pid, zp in enumerate(layout.plane_z):
            if st.z > zp >= z_to:
                dz = st.z - zp
                px = st.x + st.tx * dz
                py = st.y + st.ty * dz
                pt = st.time + dz * st.sec / (beta * C_MM_PER_NS)
                crossings[pid] = (px, py, pt)
                if abs(px) <= layout.half_extent and abs(py) <= layout.half_extent:
                    edep = rng.exponential(table.primary_edep_mean_mev)
                    hits.append(PlaneHit(pid, px, py, zp, Species.MUON,
                                         edep, pt, track_id=1))
        dz = st.z - z_to
        st.x += st.tx * dz
        st.y += st.ty * dz
        st.time += dz * st.sec / (beta * C_MM_PER_NS)
        st.z = z_to

    def process_segment(z_to: float, material: Material) -> None:
        nonlocal energy_loss, n_secondaries
        z_from = st.z
        dz = z_from - z_to
        if dz <= 0:
            return
        length = dz * st.sec
        de = table.dedx(material) * length
        if de >= st.kinetic:
            # Muon ranges out inside this segment; no kick, no secondaries.
            frac = st.kinetic / de
            stop_z = z_from - dz * frac
            loss = st.kinetic
            fly_straight(stop_z)
            st.e_total = MUON_MASS_MEV
            st.alive = False
            energy_loss += loss
            path.append(SegmentRecord(z_from, stop_z, material.kind,
                                      length * frac))
            return
        theta0 = highland_theta0(st.momentum, length, material,
                                 table.highland_mev)
        kick_x = rng.normal() * theta0
        kick_y = rng.normal() * theta0
        fly_straight(z_from - dz / 2.0)
        st.tx += kick_x
        st.ty += kick_y
        fly_straight(z_to)
        st.e_total -= de
        energy_loss += de
        n_secondaries += int(rng.poisson(table.secondary_rate(material) * length))
        path.append(SegmentRecord(z_from, z_to, material.kind, length))

    # Air leg from the gun down to the target top face.
    process_segment(EXTENT_HALF_MM, AIR)

    # Inside the target: merge equal-material probe steps into segments.
    while st.alive and st.z > -EXTENT_HALF_MM:
        seg_top = st.z
        probe_x, probe_y = st.x, st.y
        z_cursor = seg_top
        seg_material = None
        while z_cursor > -EXTENT_HALF_MM:
            step = min(PROBE_STEP_MM, z_cursor + EXTENT_HALF_MM)
            mid_z = z_cursor - step / 2.0
            m = material_at(geom, probe_x + st.tx * (seg_top - mid_z),
                            probe_y + st.ty * (seg_top - mid_z), mid_z)
            if seg_material is None:
                seg_material = m
            elif m is not seg_material:
                break
            z_cursor -= step
        process_segment(z_cursor, seg_material)

    # Air leg to below the lowest plane, then shower emission.
    if st.alive:
        process_segment(z_floor, AIR)
        hits.extend(_emit_secondaries(n_secondaries, crossings, layout,
                                      table, rng))
    return EventRecord(event_id=event_index, hits=hits,
                       true_energy_loss_mev=energy_loss, primary_path=path,
                       n_secondaries=n_secondaries, stopped=not st.alive)


_SPECIES_ORDER = (Species.ELECTRON, Species.GAMMA, Species.POSITRON)


def _emit_secondaries(n: int, crossings: dict, layout: DetectorLayout,
                      table: PhysicsTable, rng: np.random.Generator
                      ) -> list[PlaneHit]:
    """Place n secondaries on single planes around the primary crossings."""
    out: list[PlaneHit] = []
    cum = np.cumsum(table.species_probs)
    for i in range(n):
        upper = rng.uniform() < table.albedo_fraction
        station = layout.upper_ids if upper else layout.lower_ids
        pid = station[int(rng.integers(3))]
        dx = rng.normal() * table.secondary_sigma_xy_mm
        dy = rng.normal() * table.secondary_sigma_xy_mm
        u = rng.uniform()
        species = _SPECIES_ORDER[int(np.searchsorted(cum, u))]
        edep = rng.exponential(table.secondary_edep_mean_mev)
        dt = rng.normal() * table.secondary_time_sigma_ns
        if pid not in crossings:
            continue
        cx, cy, ct = crossings[pid]
        px, py = cx + dx, cy + dy
        if abs(px) > layout.half_extent or abs(py) > layout.half_extent:
            continue  # clipped by the plane
        out.append(PlaneHit(pid, px, py, layout.plane_z[pid], species,
                            edep, ct + dt, track_id=2 + i))
    return out


def emit_secondaries(n: int, exit_crossings: dict, layout: DetectorLayout,
                     table: PhysicsTable, rng: np.random.Generator
                     ) -> list[PlaneHit]:
    """Public wrapper; exit_crossings maps plane_id -> (x, y, t)."""
    if n < 0:
        raise TransportError("secondary count must be non-negative")
    return _emit_secondaries(n, exit_crossings, layout, table, rng)


def simulate_volume(geom: VolumeGeometry, beam: BeamSpec,
                    layout: DetectorLayout, table: PhysicsTable,
                    volume_seed: int, n_events: int | None = None
                    ) -> list[EventRecord]:
    n = beam.events_per_volume if n_events is None else n_events
    return [propagate_event(geom, beam, layout, table, volume_seed, i)
            for i in range(n)]


# ---------------------------------------------------------------------------
# Campaign runner and on-disk formats
# ---------------------------------------------------------------------------

HIT_CSV_HEADER = ("event_id", "track_id", "plane_id", "x_mm", "y_mm", "z_mm",
                  "species", "edep_mev", "time_ns")
EVENT_CSV_HEADER = ("event_id", "true_energy_loss_mev", "n_secondaries")


def volume_seed_for(campaign_seed: int, volume_index: int) -> int:
    """Per-volume seed: campaign_seed XOR volume_index (64-bit)."""
    return int((np.uint64(campaign_seed) ^ np.uint64(volume_index)) & _U64)


def hit_file_name(volume_index: int) -> str:
    return f"vol_{volume_index:04d}_hits.csv"


def event_file_name(volume_index: int) -> str:
    return f"vol_{volume_index:04d}_events.csv"


def label_file_name(volume_index: int) -> str:
    return f"vol_{volume_index:04d}_labels.mvlb"


def geometry_file_name(volume_index: int) -> str:
    return f"vol_{volume_index:04d}_geometry.json"


def write_hit_file(path: str | Path, events: list[EventRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HIT_CSV_HEADER)
        for ev in events:
            for h in ev.hits:
                writer.writerow((ev.event_id, h.track_id, h.plane_id,
                                 f"{h.x:.9g}", f"{h.y:.9g}", f"{h.z:.9g}",
                                 h.species.value, f"{h.edep_mev:.9g}",
                                 f"{h.time_ns:.9g}"))


def write_event_file(path: str | Path, events: list[EventRecord]) -> None:
    """Per-event summary; carries the energy loss the hit schema omits."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EVENT_CSV_HEADER)
        for ev in events:
            writer.writerow((ev.event_id, f"{ev.true_energy_loss_mev:.9g}",
                             ev.n_secondaries))


def simulate_campaign_volume(out_dir: Path, volume_index: int,
                             spec: DefectSpec, beam: BeamSpec,
                             layout: DetectorLayout, table: PhysicsTable,
                             campaign_seed: int, force: bool = False) -> dict:
    """Simulate and persist one volume; returns its manifest entry."""
    out_dir = Path(out_dir)
    seed = volume_seed_for(campaign_seed, volume_index)
    spec = DefectSpec(defect=spec.defect, seed=seed,
                      honeycombing_fraction=spec.honeycombing_fraction,
                      delamination_z=spec.delamination_z,
                      delamination_thickness=spec.delamination_thickness)
    entry = {
        "class": spec.defect.value,
        "seed": seed,
        "hit_file": hit_file_name(volume_index),
        "event_file": event_file_name(volume_index),
        "label_file": label_file_name(volume_index),
        "geometry_file": geometry_file_name(volume_index),
    }
    paths = [out_dir / entry[k] for k in
             ("hit_file", "event_file", "label_file", "geometry_file")]
    if not force and all(p.exists() for p in paths):
        return entry
    geom = build_volume(spec)
    events = simulate_volume(geom, beam, layout, table, seed)
    rasterize_labels(geom).save(out_dir / entry["label_file"])
    save_manifest(geom, out_dir / entry["geometry_file"])
    write_hit_file(out_dir / entry["hit_file"], events)
    write_event_file(out_dir / entry["event_file"], events)
    return entry


def _simulate_one(args) -> tuple[int, dict | None, str | None]:
    out_dir, index, spec, beam, layout, table, campaign_seed, force = args
    try:
        entry = simulate_campaign_volume(out_dir, index, spec, beam, layout,
                                         table, campaign_seed, force=force)
        return index, entry, None
    except OSError as exc:
        return index, None, str(exc)


def run_campaign(volume_specs: dict[int, DefectSpec], beam: BeamSpec,
                 layout: DetectorLayout, table: PhysicsTable,
                 campaign_seed: int, out_dir: str | Path,
                 n_workers: int = 1, force: bool = False
                 ) -> tuple[dict, dict[int, str]]:
    """Simulate every volume independently and write the campaign manifest.

    Volumes are keyed by index; failures are recorded per volume and do not
    abort the rest of the campaign.  Returns (manifest, errors).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(out_dir, i, spec, beam, layout, table, campaign_seed, force)
            for i, spec in sorted(volume_specs.items())]
    entries: dict[int, dict] = {}
    errors: dict[int, str] = {}
    if n_workers > 1:
        import multiprocessing as mp
        with mp.Pool(n_workers) as pool:
            results = pool.imap_unordered(_simulate_one, jobs)
            for idx, entry, err in results:
                if err is None:
                    entries[idx] = entry
                else:
                    errors[idx] = err
    else:
        for job in jobs:
            idx, entry, err = _simulate_one(job)
            if err is None:
                entries[idx] = entry
            else:
                errors[idx] = err
    manifest = {
        "campaign_seed": campaign_seed,
        "events_per_volume": beam.events_per_volume,
        "beam": {"energy_gev": beam.energy_gev, "gun_z": beam.gun_z,
                 "xy_half_width": beam.xy_half_width},
        "volumes": {str(i): entries[i] for i in sorted(entries)},
    }
    with open(out_dir / "campaign_manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest, errors


def load_campaign_manifest(dataset_dir: str | Path) -> dict:
    with open(Path(dataset_dir) / "campaign_manifest.json") as fh:
        return json.load(fh)
