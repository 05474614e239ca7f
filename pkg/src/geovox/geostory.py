"""Procedural kinematic generator for categorical 3D geology.

A story is an ordered event list (deposit, tilt, folds, faults, dike,
topography). :func:`realize` evaluates it by inverse kinematics: each voxel
centre is carried back through the structural events to its depositional
elevation, which selects a layer. Dike halos and topography are then
painted in present-day coordinates.

Coordinates are in voxel units with the origin at the grid corner, z up,
and voxel ``(i, j, k)`` centred at ``(i + .5, j + .5, k + .5)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Union

import numpy as np

from . import AIR
from .errors import ConfigError

FACIES: dict[int, str] = {
    1: "Air",
    2: "Molly Darling Sandstone",
    3: "Ignimbrite",
    4: "Mt Janet Andesite",
    5: "Conglomerate",
    6: "Siltstone / Mudstone",
    7: "Surface Sand / Soil",
    8: "Outer Argillic Alteration",
    9: "Phyllic + Silicification",
}
SOIL = 7
ARGILLIC = 8
PHYLLIC = 9
HOST_FACIES = (2, 3, 4, 5, 6)
# relative abundance of host facies when drawing a layer sequence
HOST_WEIGHTS = (0.30, 0.13, 0.32, 0.15, 0.10)


# ---------------------------------------------------------------------------
# events
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Deposit:
    thicknesses: tuple[float, ...]
    facies: tuple[int, ...]
    kind: str = field(default="deposit", init=False)


@dataclass(frozen=True)
class Tilt:
    azimuth_deg: float
    dip_deg: float
    kind: str = field(default="tilt", init=False)


@dataclass(frozen=True)
class Fold:
    amplitude: float
    wavelength: float
    phase: float
    plunge_deg: float
    kind: str = field(default="fold", init=False)


@dataclass(frozen=True)
class Fault:
    point: tuple[float, float, float]
    normal: tuple[float, float, float]
    throw: float
    kind: str = field(default="fault", init=False)


@dataclass(frozen=True)
class Dike:
    point: tuple[float, float, float]
    normal: tuple[float, float, float]
    half_thickness: float
    r_phyllic: float
    r_argillic: float
    r_propylitic: float
    kind: str = field(default="dike", init=False)


@dataclass(frozen=True)
class Topography:
    base: float
    amplitude: float
    wavelength: float
    phase_x: float
    phase_y: float
    roughness: float
    noise_seed: int
    soil_thickness: float
    min_subsurface: float = 0.6
    kind: str = field(default="topography", init=False)


Event = Union[Deposit, Tilt, Fold, Fault, Dike, Topography]
_EVENT_TYPES = {c.__name__.lower(): c for c in (Deposit, Tilt, Fold, Fault, Dike, Topography)}
_ORDER = {"deposit": 0, "tilt": 1, "fold": 2, "fault": 3, "dike": 4, "topography": 5}


@dataclass(frozen=True)
class GeoStory:
    seed: int
    events: tuple[Event, ...]
    grid_dims: tuple[int, int, int]

    def __post_init__(self):
        ranks = [_ORDER[e.kind] for e in self.events]
        if ranks != sorted(ranks):
            raise ConfigError(f"events out of geological order: {[e.kind for e in self.events]}")
        if not self.events or self.events[0].kind != "deposit":
            raise ConfigError("a story must start with a Deposit event")
        if sum(1 for e in self.events if e.kind == "dike") > 1:
            raise ConfigError("at most one dike per story")

    def of_kind(self, kind: str) -> list[Event]:
        return [e for e in self.events if e.kind == kind]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "grid_dims": list(self.grid_dims),
            "events": [asdict(e) for e in self.events],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeoStory":
        evs = []
        for e in d["events"]:
            e = dict(e)
            klass = _EVENT_TYPES[e.pop("kind")]
            kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in e.items()}
            evs.append(klass(**kw))
        return cls(int(d["seed"]), tuple(evs), tuple(d["grid_dims"]))


# ---------------------------------------------------------------------------
# parameter ranges
# ---------------------------------------------------------------------------

# keys holding lengths in voxels; scaled by for_grid()
_LENGTH_KEYS = (
    "thickness", "fold_amplitude", "fold_wavelength", "fault_throw",
    "dike_half_thickness", "halo_phyllic", "halo_argillic", "halo_propylitic",
    "topo_base", "topo_amplitude", "topo_wavelength", "topo_roughness", "soil_thickness",
)


@dataclass(frozen=True)
class StoryRanges:
    """Inclusive (min, max) bounds for every sampled story parameter.

    Length-valued ranges are in voxels for a 64-voxel-tall grid; use
    :meth:`for_grid` to rescale. Halo entries are widths added outward, so
    sampled radii are strictly increasing.
    """

    n_layers: tuple[int, int] = (5, 8)
    thickness: tuple[float, float] = (4.0, 14.0)
    tilt_azimuth: tuple[float, float] = (0.0, 360.0)
    tilt_dip: tuple[float, float] = (0.0, 25.0)
    n_folds: tuple[int, int] = (1, 1)
    fold_amplitude: tuple[float, float] = (0.0, 8.0)
    fold_wavelength: tuple[float, float] = (32.0, 96.0)
    fold_phase: tuple[float, float] = (0.0, 2 * math.pi)
    fold_plunge: tuple[float, float] = (0.0, 15.0)
    n_faults: tuple[int, int] = (2, 2)
    fault_strike: tuple[float, float] = (0.0, 360.0)
    fault_dip: tuple[float, float] = (55.0, 85.0)
    fault_throw: tuple[float, float] = (0.0, 8.0)
    fault_offset: tuple[float, float] = (0.25, 0.75)
    dike_strike: tuple[float, float] = (0.0, 360.0)
    dike_dip: tuple[float, float] = (70.0, 90.0)
    dike_offset: tuple[float, float] = (0.3, 0.7)
    dike_half_thickness: tuple[float, float] = (0.6, 1.6)
    halo_phyllic: tuple[float, float] = (0.4, 1.2)
    halo_argillic: tuple[float, float] = (0.6, 2.0)
    halo_propylitic: tuple[float, float] = (1.0, 4.0)
    topo_base: tuple[float, float] = (38.0, 46.0)
    topo_amplitude: tuple[float, float] = (0.0, 6.0)
    topo_wavelength: tuple[float, float] = (48.0, 128.0)
    topo_roughness: tuple[float, float] = (0.0, 2.0)
    soil_thickness: tuple[float, float] = (3.0, 5.0)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for f in fields(self):
            r = getattr(self, f.name)
            if r is None or len(r) != 2:
                raise ConfigError(f"range {f.name!r} must be a (min, max) pair, got {r!r}")
            lo, hi = r
            if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
                raise ConfigError(f"range {f.name!r} malformed: {r!r}")
        for k in ("n_layers", "n_folds", "n_faults"):
            lo, hi = getattr(self, k)
            if int(lo) != lo or int(hi) != hi or lo < 0:
                raise ConfigError(f"{k} must be non-negative integers")
        if self.n_layers[0] < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.thickness[0] <= 0 or self.fold_wavelength[0] <= 0:
            raise ConfigError("thickness and fold wavelength must be positive")

    def for_grid(self, nz: int) -> "StoryRanges":
        s = nz / 64.0
        kw = {k: (getattr(self, k)[0] * s, getattr(self, k)[1] * s) for k in _LENGTH_KEYS}
        lo, hi = kw["soil_thickness"]
        kw["soil_thickness"] = (max(1.0, lo), max(1.0, hi))
        return replace(self, **kw)

    def with_overrides(self, **overrides) -> "StoryRanges":
        unknown = set(overrides) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown range keys: {sorted(unknown)}")
        return replace(self, **{k: tuple(v) for k, v in overrides.items()})

    def to_dict(self) -> dict:
        return {f.name: list(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict | None) -> "StoryRanges":
        if not d:
            raise ConfigError("empty parameter ranges")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown range keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) for k, v in d.items()})


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n == 0:
        raise ConfigError(f"plane normal must be a non-zero vector, got {tuple(v)}")
    return v / n


def plane_normal(strike_deg: float, dip_deg: float) -> tuple[float, float, float]:
    """Upward unit normal of a plane given strike (from north, clockwise) and dip."""
    dd = math.radians(strike_deg + 90.0)  # dip direction
    dip = math.radians(dip_deg)
    n = (math.sin(dip) * math.sin(dd), math.sin(dip) * math.cos(dd), math.cos(dip))
    return tuple(float(c) for c in n)


def sample_story(seed: int, ranges: StoryRanges, grid_dims=(64, 64, 64)) -> GeoStory:
    """Draw a story; every continuous parameter is uniform over its range."""
    if ranges is None:
        raise ConfigError("empty parameter ranges")
    ranges.validate()
    nx, ny, nz = (int(n) for n in grid_dims)
    rng = np.random.default_rng(seed)

    def u(key):
        lo, hi = getattr(ranges, key)
        return float(rng.uniform(lo, hi))

    def count(key):
        lo, hi = getattr(ranges, key)
        return int(rng.integers(int(lo), int(hi) + 1))

    n_layers = count("n_layers")
    thick = tuple(u("thickness") for _ in range(n_layers))
    facies = []
    w = np.asarray(HOST_WEIGHTS)
    for _ in range(n_layers):
        p = w.copy()
        if facies:
            p[HOST_FACIES.index(facies[-1])] = 0.0
        facies.append(int(rng.choice(HOST_FACIES, p=p / p.sum())))
    events: list[Event] = [Deposit(thick, tuple(facies))]
    events.append(Tilt(u("tilt_azimuth"), u("tilt_dip")))
    for _ in range(count("n_folds")):
        events.append(Fold(u("fold_amplitude"), u("fold_wavelength"), u("fold_phase"), u("fold_plunge")))
    for _ in range(count("n_faults")):
        strike, dip, throw = u("fault_strike"), u("fault_dip"), u("fault_throw")
        px, py = u("fault_offset") * nx, u("fault_offset") * ny
        events.append(Fault((px, py, nz / 2.0), plane_normal(strike, dip), throw))
    strike, dip = u("dike_strike"), u("dike_dip")
    px, py = u("dike_offset") * nx, u("dike_offset") * ny
    ht = u("dike_half_thickness")
    r9 = ht + u("halo_phyllic")
    r8 = r9 + u("halo_argillic")
    r_prop = r8 + u("halo_propylitic")
    events.append(Dike((px, py, nz / 2.0), plane_normal(strike, dip), ht, r9, r8, r_prop))
    events.append(Topography(
        base=u("topo_base"),
        amplitude=u("topo_amplitude"),
        wavelength=u("topo_wavelength"),
        phase_x=float(rng.uniform(0, 2 * math.pi)),
        phase_y=float(rng.uniform(0, 2 * math.pi)),
        roughness=u("topo_roughness"),
        noise_seed=int(rng.integers(0, 2**31 - 1)),
        soil_thickness=u("soil_thickness"),
    ))
    return GeoStory(int(seed), tuple(events), (nx, ny, nz))


# ---------------------------------------------------------------------------
# realisation
# ---------------------------------------------------------------------------

def voxel_centres(dims) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    nx, ny, nz = dims
    return np.meshgrid(np.arange(nx) + 0.5, np.arange(ny) + 0.5, np.arange(nz) + 0.5, indexing="ij")


def _undo_fault(x, y, z, ev: Fault):
    n = _unit(ev.normal)
    if n[2] < 0:
        n = -n
    p = np.asarray(ev.point, dtype=np.float64)
    side = (x - p[0]) * n[0] + (y - p[1]) * n[1] + (z - p[2]) * n[2]
    # hanging wall (upper side) dropped by the throw
    return x, y, np.where(side > 0, z + ev.throw, z)


def _fold_shift(x, y, ev: Fold):
    k = 2 * math.pi / ev.wavelength
    return ev.amplitude * np.sin(k * x + ev.phase + k * math.tan(math.radians(ev.plunge_deg)) * y)


def _undo_tilt(x, y, z, ev: Tilt, centre):
    a = math.radians(ev.azimuth_deg)
    d = math.radians(ev.dip_deg)
    dx, dy = math.sin(a), math.cos(a)
    cx, cy, cz = centre
    rx, ry, rz = x - cx, y - cy, z - cz
    s = rx * dx + ry * dy  # coordinate along dip direction
    zp = s * math.sin(d) + rz * math.cos(d)
    sp = s * math.cos(d) - rz * math.sin(d)
    xp = rx + (sp - s) * dx + cx
    yp = ry + (sp - s) * dy + cy
    return xp, yp, zp + cz


def depositional_elevation(story: GeoStory) -> np.ndarray:
    """Pre-deformation elevation of every voxel centre."""
    x, y, z = voxel_centres(story.grid_dims)
    centre = tuple(n / 2.0 for n in story.grid_dims)
    for ev in reversed(story.events):
        if ev.kind == "fault":
            x, y, z = _undo_fault(x, y, z, ev)
        elif ev.kind == "fold":
            z = z - _fold_shift(x, y, ev)
        elif ev.kind == "tilt":
            x, y, z = _undo_tilt(x, y, z, ev, centre)
    return z


def layer_labels(z_dep: np.ndarray, deposit: Deposit) -> np.ndarray:
    """Assign layers bottom-up; a voxel exactly on a boundary joins the deeper layer."""
    if len(deposit.thicknesses) != len(deposit.facies) or not deposit.facies:
        raise ConfigError("deposit needs one facies per layer")
    if any(t <= 0 for t in deposit.thicknesses):
        raise ConfigError("layer thicknesses must be positive")
    bounds = np.cumsum(deposit.thicknesses)[:-1]
    idx = np.searchsorted(bounds, z_dep, side="left")
    return np.asarray(deposit.facies, dtype=np.uint8)[idx]


def surface_height(topo: Topography, dims) -> np.ndarray:
    """Ground elevation h(x, y) at column centres, clamped to keep >= min_subsurface of Z."""
    nx, ny, nz = dims
    x, y = np.meshgrid(np.arange(nx) + 0.5, np.arange(ny) + 0.5, indexing="ij")
    return surface_height_at(topo, dims, x, y)


def surface_height_at(topo: Topography, dims, x, y) -> np.ndarray:
    nx, ny, nz = dims
    k = 2 * math.pi / topo.wavelength
    h = topo.base + topo.amplitude * np.sin(k * x + topo.phase_x) * np.cos(k * y + topo.phase_y)
    if topo.roughness:
        rng = np.random.default_rng(topo.noise_seed)
        # a few random low-frequency modes, normalised to unit RMS
        noise = np.zeros_like(h)
        for _ in range(6):
            fx, fy = rng.integers(1, 4, size=2)
            ph = rng.uniform(0, 2 * math.pi)
            noise += np.cos(2 * math.pi * (fx * x / nx + fy * y / ny) + ph)
        h = h + topo.roughness * noise / math.sqrt(3.0)
    return np.clip(h, topo.min_subsurface * nz, nz)


def apply_topography(vol: np.ndarray, topo: Topography) -> np.ndarray:
    dims = vol.shape
    h = surface_height(topo, dims)[:, :, None]
    zc = np.arange(dims[2]) + 0.5
    out = vol.copy()
    out[(zc > h - topo.soil_thickness) & (zc <= h)] = SOIL
    out[zc > h] = AIR
    return out


def halo_zones(dims, dike: Dike) -> np.ndarray:
    """Zone index per voxel: 0 none, 1 propylitic, 2 argillic, 3 phyllic-silicic/dike core."""
    n = _unit(dike.normal)
    radii = (dike.r_phyllic, dike.r_argillic, dike.r_propylitic)
    if dike.half_thickness < 0 or any(r < 0 for r in radii):
        raise ConfigError("dike thickness and halo radii must be non-negative")
    if not (dike.r_phyllic <= dike.r_argillic <= dike.r_propylitic):
        raise ConfigError("halo radii must increase outward: phyllic <= argillic <= propylitic")
    x, y, z = voxel_centres(dims)
    p = dike.point
    d = np.abs((x - p[0]) * n[0] + (y - p[1]) * n[1] + (z - p[2]) * n[2])
    zones = np.zeros(dims, dtype=np.uint8)
    zones[d < dike.r_propylitic] = 1
    zones[d < dike.r_argillic] = 2
    zones[d < max(dike.half_thickness, dike.r_phyllic)] = 3
    return zones


def apply_dike_and_halos(vol: np.ndarray, dike: Dike) -> np.ndarray:
    """Overwrite the dike core and inner halo with 9 and the argillic shell with 8.

    The propylitic shell keeps its host label. Air is never overwritten.
    """
    if getattr(dike, "kind", None) != "dike":
        raise ConfigError("apply_dike_and_halos needs a Dike event")
    zones = halo_zones(vol.shape, dike)
    out = vol.copy()
    ground = vol != AIR
    out[(zones == 2) & ground] = ARGILLIC
    out[(zones == 3) & ground] = PHYLLIC
    return out


def realize(story: GeoStory) -> np.ndarray:
    """Evaluate a story into a uint8 label grid of shape ``grid_dims``."""
    deposit = story.of_kind("deposit")[0]
    vol = layer_labels(depositional_elevation(story), deposit)
    for dike in story.of_kind("dike"):
        vol = apply_dike_and_halos(vol, dike)
    for topo in story.of_kind("topography"):
        vol = apply_topography(vol, topo)
    return vol
