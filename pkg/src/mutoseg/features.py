"""Track fitting, scattering-point reconstruction, and voxel feature tensors.

Each accepted event contributes one sample at the voxel containing its
reconstructed scattering point (midpoint of the mutual perpendicular between
the fitted incoming and outgoing tracks).  Two tensors are accumulated per
volume:

    stream 1 (9 x 20^3)  - scattering kinematics: per-voxel means of |theta_x|,
        |theta_y|, theta_total, |dx|, |dy|, energy loss, track-length ratio
        and primary energy deposit, plus a raw event-count channel (8).
    stream 2 (40 x 20^3) - shower statistics: for each of the six planes the
        electron/gamma/positron counts, secondary energy deposit, spatial
        spread sigma_xy and time spread (channels p*6+s); then shower
        asymmetry (36), energy-deposit ratio (37) and total secondary count
        (38) as per-voxel means, plus a raw secondary-hit-count channel (39).

Angle and displacement channels store magnitudes so that mirroring the hit
coordinates along an axis mirrors the feature tensors along that axis exactly
(the property that licenses flip augmentation during training).

Displacements are measured between the two fitted tracks extrapolated to the
target exit plane (z = -500 mm); the track-length ratio is the two-chord path
entry -> scattering point -> exit over the straight entry -> exit distance.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import EXTENT_HALF_MM, GRID_N, VOXEL_PITCH_MM
from .transport import EventRecord, Species

N_STREAM1 = 9
N_STREAM2 = 40
N_CHANNELS = N_STREAM1 + N_STREAM2

_PLANE_STATS = ("e_count", "gamma_count", "positron_count", "edep",
                "sigma_xy", "time_spread")

STREAM1_CHANNEL_NAMES = (
    "abs_theta_x", "abs_theta_y", "theta_total", "abs_dx", "abs_dy",
    "energy_loss", "track_length_ratio", "primary_edep", "event_count",
)
STREAM2_CHANNEL_NAMES = tuple(
    f"plane{p}_{s}" for p in range(6) for s in _PLANE_STATS
) + ("shower_asymmetry", "edep_ratio", "total_secondaries", "secondary_hit_count")

CHANNEL_NAMES = STREAM1_CHANNEL_NAMES + STREAM2_CHANNEL_NAMES

_MVFT_MAGIC = b"MVFT"
_MVFT_VERSION = 1

_EDEP_RATIO_EPS = 1e-6
_PARALLEL_SIN_EPS = 1e-9

_SPECIES_CODE = {Species.ELECTRON: 0, Species.GAMMA: 1, Species.POSITRON: 2}
_SPECIES_CODE_FROM_STR = {"e-": 0, "gamma": 1, "e+": 2}


class FeatureError(ValueError):
    """Raised for malformed inputs to the feature pipeline."""


# ---------------------------------------------------------------------------
# Track fitting and scattering-point reconstruction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FittedTrack:
    """Straight line through one station's hits.

    point is on the line at the station's mean z; direction is unit length
    with a negative z component (downward-going convention).
    """

    point: tuple[float, float, float]
    direction: tuple[float, float, float]
    residual_rms: float


def fit_station_track(hits) -> FittedTrack:
    """Least-squares line x(z), y(z) through exactly three plane hits."""
    pts = np.asarray([(h[0], h[1], h[2]) for h in hits], dtype=np.float64)
    if pts.shape[0] != 3:
        raise FeatureError(f"station fit needs 3 hits, got {pts.shape[0]}")
    z = pts[:, 2]
    if len(np.unique(z)) != 3:
        raise FeatureError("station hits must lie on distinct planes")
    zc = z - z.mean()
    szz = float(np.dot(zc, zc))
    bx = float(np.dot(zc, pts[:, 0])) / szz
    by = float(np.dot(zc, pts[:, 1])) / szz
    ax = float(pts[:, 0].mean())
    ay = float(pts[:, 1].mean())
    rx = pts[:, 0] - (ax + bx * zc)
    ry = pts[:, 1] - (ay + by * zc)
    # n - 2 = 1 residual degree of freedom per coordinate.
    residual = math.sqrt((float(np.dot(rx, rx)) + float(np.dot(ry, ry))) / 2.0)
    norm = math.sqrt(bx * bx + by * by + 1.0)
    direction = (-bx / norm, -by / norm, -1.0 / norm)
    return FittedTrack(point=(ax, ay, float(z.mean())), direction=direction,
                       residual_rms=residual)


@dataclass(frozen=True)
class PocaResult:
    point: tuple[float, float, float]
    theta_total: float
    theta_x: float
    theta_y: float
    doca: float
    fallback: bool = False


def _line_at_z(track: FittedTrack, z: float) -> np.ndarray:
    p = np.asarray(track.point)
    d = np.asarray(track.direction)
    t = (z - p[2]) / d[2]
    return p + t * d


def poca(incoming: FittedTrack, outgoing: FittedTrack) -> PocaResult:
    """Midpoint of the mutual perpendicular between the two fitted lines.

    Near-parallel lines (sine of opening angle < 1e-9) fall back to the point
    on the incoming line at the target mid-plane z = 0.
    """
    p1 = np.asarray(incoming.point, dtype=np.float64)
    p2 = np.asarray(outgoing.point, dtype=np.float64)
    d1 = np.asarray(incoming.direction, dtype=np.float64)
    d2 = np.asarray(outgoing.direction, dtype=np.float64)
    cross = np.cross(d1, d2)
    sin_angle = float(np.linalg.norm(cross))
    cos_angle = float(np.dot(d1, d2))
    theta_total = math.atan2(sin_angle, cos_angle)
    sx1, sy1 = d1[0] / d1[2], d1[1] / d1[2]
    sx2, sy2 = d2[0] / d2[2], d2[1] / d2[2]
    theta_x = math.atan(sx2) - math.atan(sx1)
    theta_y = math.atan(sy2) - math.atan(sy1)
    if sin_angle < _PARALLEL_SIN_EPS:
        point = _line_at_z(incoming, 0.0)
        doca = float(np.linalg.norm(np.cross(p2 - p1, d1)))
        return PocaResult(tuple(point), theta_total, theta_x, theta_y, doca,
                          fallback=True)
    w0 = p1 - p2
    b = float(np.dot(d1, d2))
    d_ = float(np.dot(d1, w0))
    e = float(np.dot(d2, w0))
    denom = 1.0 - b * b
    t = (b * e - d_) / denom
    s = (e - b * d_) / denom
    q1 = p1 + t * d1
    q2 = p2 + s * d2
    point = (q1 + q2) / 2.0
    doca = float(np.linalg.norm(q1 - q2))
    return PocaResult(tuple(point), theta_total, theta_x, theta_y, doca)


# ---------------------------------------------------------------------------
# Event views (shared between in-memory records and CSV files)
# ---------------------------------------------------------------------------

@dataclass
class EventView:
    """One event reduced to what feature extraction needs."""

    event_id: int
    upper_hits: list            # three (x, y, z) for planes 0..2
    lower_hits: list            # three (x, y, z) for planes 3..5
    primary_edep: float
    energy_loss: float
    sec_plane: np.ndarray       # int plane ids
    sec_species: np.ndarray     # codes 0=e-, 1=gamma, 2=e+
    sec_x: np.ndarray
    sec_y: np.ndarray
    sec_edep: np.ndarray
    sec_time: np.ndarray
    complete: bool              # 3 primary hits on each station


def _view_from_lists(event_id, prim, sec, energy_loss) -> EventView:
    upper = sorted([p for p in prim if p[0] <= 2])
    lower = sorted([p for p in prim if p[0] >= 3])
    sec_arr = np.asarray(sec, dtype=np.float64).reshape(-1, 6)
    return EventView(
        event_id=event_id,
        upper_hits=[(x, y, z) for _, x, y, z, _ in upper],
        lower_hits=[(x, y, z) for _, x, y, z, _ in lower],
        primary_edep=float(sum(p[4] for p in prim)),
        energy_loss=energy_loss,
        sec_plane=sec_arr[:, 0].astype(np.int64),
        sec_species=sec_arr[:, 1].astype(np.int64),
        sec_x=sec_arr[:, 2],
        sec_y=sec_arr[:, 3],
        sec_edep=sec_arr[:, 4],
        sec_time=sec_arr[:, 5],
        complete=len(upper) == 3 and len(lower) == 3,
    )


def event_views_from_records(events: list[EventRecord]) -> list[EventView]:
    views = []
    for ev in events:
        prim = [(h.plane_id, h.x, h.y, h.z, h.edep_mev)
                for h in ev.hits if h.track_id == 1]
        sec = [(h.plane_id, _SPECIES_CODE[h.species], h.x, h.y, h.edep_mev,
                h.time_ns) for h in ev.hits if h.track_id > 1]
        views.append(_view_from_lists(ev.event_id, prim, sec,
                                      ev.true_energy_loss_mev))
    return views


def load_volume_events(hit_csv: str | Path, event_csv: str | Path
                       ) -> list[EventView]:
    """Rebuild event views from the persisted hit and event-summary files."""
    losses: dict[int, float] = {}
    with open(event_csv, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            losses[int(row["event_id"])] = float(row["true_energy_loss_mev"])
    prim: dict[int, list] = {eid: [] for eid in losses}
    sec: dict[int, list] = {eid: [] for eid in losses}
    with open(hit_csv, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            eid = int(row["event_id"])
            tid = int(row["track_id"])
            if eid not in losses:
                raise FeatureError(f"hit row references unknown event {eid}")
            x, y, z = float(row["x_mm"]), float(row["y_mm"]), float(row["z_mm"])
            edep = float(row["edep_mev"])
            if tid == 1:
                prim[eid].append((int(row["plane_id"]), x, y, z, edep))
            else:
                code = _SPECIES_CODE_FROM_STR[row["species"]]
                sec[eid].append((int(row["plane_id"]), code, x, y, edep,
                                 float(row["time_ns"])))
    return [_view_from_lists(eid, prim[eid], sec[eid], losses[eid])
            for eid in sorted(losses)]


# ---------------------------------------------------------------------------
# Stream accumulation
# ---------------------------------------------------------------------------

@dataclass
class ExtractionResult:
    stream1: np.ndarray
    stream2: np.ndarray
    n_events: int
    n_accepted: int
    n_dropped_missing_hits: int
    n_dropped_out_of_grid: int


def _event_stream1_vector(view: EventView, rec: PocaResult,
                          incoming: FittedTrack, outgoing: FittedTrack
                          ) -> np.ndarray:
    entry = _line_at_z(incoming, EXTENT_HALF_MM)
    exit_in = _line_at_z(incoming, -EXTENT_HALF_MM)
    exit_out = _line_at_z(outgoing, -EXTENT_HALF_MM)
    dx = exit_out[0] - exit_in[0]
    dy = exit_out[1] - exit_in[1]
    v = np.asarray(rec.point)
    chord = (float(np.linalg.norm(entry - v))
             + float(np.linalg.norm(v - exit_out)))
    straight = float(np.linalg.norm(entry - exit_out))
    ratio = chord / straight
    return np.array([abs(rec.theta_x), abs(rec.theta_y), rec.theta_total,
                     abs(dx), abs(dy), view.energy_loss, ratio,
                     view.primary_edep], dtype=np.float64)


def _event_stream2_vector(view: EventView) -> np.ndarray:
    out = np.zeros(39, dtype=np.float64)
    total = view.sec_plane.size
    for p in range(6):
        mask = view.sec_plane == p
        n = int(mask.sum())
        base = p * 6
        if n == 0:
            continue
        species = view.sec_species[mask]
        out[base + 0] = float(np.sum(species == 0))
        out[base + 1] = float(np.sum(species == 1))
        out[base + 2] = float(np.sum(species == 2))
        out[base + 3] = float(np.sum(view.sec_edep[mask]))
        if n >= 2:
            xs = view.sec_x[mask]
            ys = view.sec_y[mask]
            rx = xs - xs.mean()
            ry = ys - ys.mean()
            out[base + 4] = math.sqrt(
                (float(np.dot(rx, rx)) + float(np.dot(ry, ry))) / (n - 1))
            ts = view.sec_time[mask]
            out[base + 5] = float(np.std(ts, ddof=1))
    upper = int(np.sum(view.sec_plane <= 2))
    lower = total - upper
    out[36] = (lower - upper) / total if total > 0 else 0.0
    out[37] = float(np.sum(view.sec_edep)) / (view.primary_edep + _EDEP_RATIO_EPS)
    out[38] = float(total)
    return out


def extract_streams(views: list[EventView]) -> ExtractionResult:
    """Accumulate both feature tensors over a volume's events.

    Mean channels are accumulated as sum/count in event order; the two count
    channels (stream 1 channel 8, stream 2 channel 39) stay raw sums.
    """
    shape = (GRID_N, GRID_N, GRID_N)
    s1_sum = np.zeros((8,) + shape, dtype=np.float64)
    s2_sum = np.zeros((39,) + shape, dtype=np.float64)
    count = np.zeros(shape, dtype=np.float64)
    sec_count = np.zeros(shape, dtype=np.float64)
    n_missing = 0
    n_out = 0
    n_accepted = 0
    for view in views:
        if not view.complete:
            n_missing += 1
            continue
        incoming = fit_station_track(view.upper_hits)
        outgoing = fit_station_track(view.lower_hits)
        rec = poca(incoming, outgoing)
        voxel = _point_to_voxel(rec.point)
        if voxel is None:
            n_out += 1
            continue
        n_accepted += 1
        s1_sum[(slice(None),) + voxel] += _event_stream1_vector(
            view, rec, incoming, outgoing)
        s2_sum[(slice(None),) + voxel] += _event_stream2_vector(view)
        count[voxel] += 1.0
        sec_count[voxel] += float(view.sec_plane.size)
    denom = np.maximum(count, 1.0)
    stream1 = np.empty((N_STREAM1,) + shape, dtype=np.float32)
    stream1[:8] = (s1_sum / denom).astype(np.float32)
    stream1[8] = count.astype(np.float32)
    stream2 = np.empty((N_STREAM2,) + shape, dtype=np.float32)
    stream2[:39] = (s2_sum / denom).astype(np.float32)
    stream2[39] = sec_count.astype(np.float32)
    return ExtractionResult(stream1=stream1, stream2=stream2,
                            n_events=len(views), n_accepted=n_accepted,
                            n_dropped_missing_hits=n_missing,
                            n_dropped_out_of_grid=n_out)


def _point_to_voxel(point) -> tuple[int, int, int] | None:
    ix = math.floor((point[0] + EXTENT_HALF_MM) / VOXEL_PITCH_MM)
    iy = math.floor((point[1] + EXTENT_HALF_MM) / VOXEL_PITCH_MM)
    iz = math.floor((point[2] + EXTENT_HALF_MM) / VOXEL_PITCH_MM)
    if 0 <= ix < GRID_N and 0 <= iy < GRID_N and 0 <= iz < GRID_N:
        return (int(ix), int(iy), int(iz))
    return None


def accumulate_stream1(views: list[EventView]) -> np.ndarray:
    return extract_streams(views).stream1


def accumulate_stream2(views: list[EventView]) -> np.ndarray:
    return extract_streams(views).stream2


# ---------------------------------------------------------------------------
# Feature-volume container and binary format
# ---------------------------------------------------------------------------

@dataclass
class FeatureVolume:
    stream1: np.ndarray
    stream2: np.ndarray
    volume_index: int
    label_file: str = ""

    def __post_init__(self):
        if self.stream1.shape != (N_STREAM1, GRID_N, GRID_N, GRID_N):
            raise FeatureError(f"stream1 shape {self.stream1.shape}")
        if self.stream2.shape != (N_STREAM2, GRID_N, GRID_N, GRID_N):
            raise FeatureError(f"stream2 shape {self.stream2.shape}")
        if not (np.isfinite(self.stream1).all()
                and np.isfinite(self.stream2).all()):
            raise FeatureError("non-finite feature values")


def save_feature_tensor(path: str | Path, arr: np.ndarray) -> None:
    """Binary layout: 'MVFT', u32 version, u32 n_channels, u32 dims[3];
    float32 payload, channel-major then x-fastest, little-endian."""
    import struct
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    c = arr.shape[0]
    with open(path, "wb") as fh:
        fh.write(_MVFT_MAGIC)
        fh.write(struct.pack("<5I", _MVFT_VERSION, c, *arr.shape[1:]))
        body = np.concatenate([arr[i].ravel(order="F") for i in range(c)])
        fh.write(body.astype("<f4").tobytes())


def load_feature_tensor(path: str | Path) -> np.ndarray:
    import struct
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MVFT_MAGIC:
            raise FeatureError(f"bad feature-tensor magic {magic!r} in {path}")
        version, c, nx, ny, nz = struct.unpack("<5I", fh.read(20))
        if version != _MVFT_VERSION:
            raise FeatureError(f"unsupported feature-tensor version {version}")
        body = np.frombuffer(fh.read(4 * c * nx * ny * nz), dtype="<f4")
    out = np.empty((c, nx, ny, nz), dtype=np.float32)
    per = nx * ny * nz
    for i in range(c):
        out[i] = body[i * per:(i + 1) * per].reshape((nx, ny, nz), order="F")
    return out


# ---------------------------------------------------------------------------
# Normalization statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NormStats:
    """Per-channel standardization constants, training split only.

    Channels 0..8 are stream 1, channels 9..48 are stream 2.
    """

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if self.mean.shape != (N_CHANNELS,) or self.std.shape != (N_CHANNELS,):
            raise FeatureError("norm stats must cover all 49 channels")

    def save(self, path: str | Path) -> None:
        rows = [{"channel": i, "name": CHANNEL_NAMES[i],
                 "mean": float(self.mean[i]), "std": float(self.std[i])}
                for i in range(N_CHANNELS)]
        with open(path, "w") as fh:
            json.dump(rows, fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "NormStats":
        with open(path) as fh:
            rows = json.load(fh)
        mean = np.zeros(N_CHANNELS)
        std = np.zeros(N_CHANNELS)
        for row in rows:
            mean[row["channel"]] = row["mean"]
            std[row["channel"]] = row["std"]
        return cls(mean=mean, std=std)


def compute_norm_stats(volumes: list[tuple[np.ndarray, np.ndarray]]) -> NormStats:
    """Channel-wise mean/std over all voxels of the given (training) volumes.

    Raises FeatureError naming the first dead (zero-variance) channel.
    """
    if len(volumes) < 2:
        raise FeatureError("need at least two training volumes for statistics")
    flat = [np.concatenate([s1.reshape(N_STREAM1, -1), s2.reshape(N_STREAM2, -1)],
                           axis=0).astype(np.float64)
            for s1, s2 in volumes]
    data = np.concatenate(flat, axis=1)
    mean = data.mean(axis=1)
    std = data.std(axis=1)
    dead = np.nonzero(std == 0.0)[0]
    if dead.size:
        i = int(dead[0])
        raise FeatureError(
            f"dead channel {i} ({CHANNEL_NAMES[i]}): zero variance on the "
            f"training split")
    return NormStats(mean=mean, std=std)


def apply_norm(stream1: np.ndarray, stream2: np.ndarray, stats: NormStats
               ) -> tuple[np.ndarray, np.ndarray]:
    """Standardize both streams with the saved training statistics."""
    m1 = stats.mean[:N_STREAM1].astype(np.float32)[:, None, None, None]
    s1 = stats.std[:N_STREAM1].astype(np.float32)[:, None, None, None]
    m2 = stats.mean[N_STREAM1:].astype(np.float32)[:, None, None, None]
    s2 = stats.std[N_STREAM1:].astype(np.float32)[:, None, None, None]
    return ((stream1 - m1) / s1, (stream2 - m2) / s2)
