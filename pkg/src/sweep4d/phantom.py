"""Breathing phantom: static anatomy, analytic respiratory deformation,
and SWEEP-style sequential slice acquisition with known per-slice phase.

The breathing level l(t) in [0, 1) plays the role of the respiratory phase
everywhere: 0 is the exhale extreme, values near 1 the inhale extreme, and
the discrete ground-truth state is floor(l * K).  Displacement scales
nonlinearly with level (level ** gamma), which makes the inhale extreme
deviate more from the temporal average than the exhale extreme, as real
breathing does.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .breath import RespiratoryLabeling
from .errors import ConfigError, DataError
from .srrecon import PsfSpec
from .volume import SliceStack, Volume3D

_PHASE_EPS = 1e-9


@dataclass(frozen=True)
class Shape:
    """Ellipsoid, cuboid, or ellipsoidal shell in mm coordinates."""

    kind: str  # "ellipsoid" | "cuboid" | "shell"
    center: tuple  # (x, y, z) mm
    radii: tuple  # semi-axes / half-extents, mm
    intensity: float
    inner_radii: tuple | None = None  # shells only

    def __post_init__(self):
        if self.kind not in ("ellipsoid", "cuboid", "shell"):
            raise ConfigError(f"unknown shape kind {self.kind!r}")
        if self.kind == "shell" and self.inner_radii is None:
            raise ConfigError("shell shapes need inner_radii")
        if self.intensity < 0:
            raise ConfigError("shape intensities must be non-negative")


@dataclass
class PhantomSpec:
    dims: tuple = (96, 96, 120)  # (nx, ny, nz)
    spacing: tuple = (1.0, 1.0, 1.0)
    shapes: list = None
    texture_amplitude: float = 0.05
    texture_scale_mm: float = 8.0
    noise_sigma: float = 0.0  # fraction of dynamic range, applied at acquisition
    seed: int = 0

    def __post_init__(self):
        if self.shapes is None:
            self.shapes = default_shapes(self.dims, self.spacing)


@dataclass
class BreathingModel:
    period_s: float = 4.0
    amp_mm: float = 6.0  # superior-inferior translation of the moving region
    shell_scale: float = 0.05  # radial scaling of the diaphragm shell
    waveform: str = "sinusoid"  # sinusoid | sinusoid4 | triangle
    drift_rate: float = 0.0  # fractional period drift per second
    level_gamma: float = 1.5  # displacement ~ level ** gamma
    neutral_level: float = 0.0  # level with zero displacement (rest position)
    seed: int = 0

    def __post_init__(self):
        if self.waveform not in ("sinusoid", "sinusoid4", "triangle"):
            raise ConfigError(f"unknown waveform {self.waveform!r}")
        if self.period_s <= 0:
            raise ConfigError("breathing period must be positive")

    def phase_cycles(self, t: float) -> float:
        """Accumulated breathing cycles at time t (with optional drift)."""
        return t / self.period_s + 0.5 * self.drift_rate * t * t / self.period_s

    def level(self, t) -> np.ndarray:
        """Respiratory level in [0, 1): 0 exhale extreme, ~1 inhale extreme."""
        c = self.phase_cycles(np.asarray(t, dtype=float))
        if self.waveform == "sinusoid":
            lv = 0.5 - 0.5 * np.cos(2.0 * np.pi * c)
        elif self.waveform == "triangle":
            # uniform level occupancy: every amplitude bin gets equal time
            lv = 1.0 - np.abs(2.0 * np.mod(c, 1.0) - 1.0)
        else:
            lv = np.sin(np.pi * c) ** 4
        return np.clip(lv, 0.0, 1.0 - _PHASE_EPS)

    def displacement_scale(self, level) -> np.ndarray:
        lv = np.asarray(level, dtype=float) ** self.level_gamma
        return lv - self.neutral_level ** self.level_gamma


@dataclass
class AcquisitionSpec:
    slice_time_s: float = 0.490
    sweep_rate_mm_s: float = 0.17
    slice_thickness_mm: float = 4.0
    n_slices: int = 200
    z_start_mm: float = 0.0
    noise_sigma: float = 0.0  # fraction of dynamic range
    seed: int = 0

    def __post_init__(self):
        if min(self.slice_time_s, self.sweep_rate_mm_s, self.slice_thickness_mm) <= 0:
            raise ConfigError("acquisition timings/geometry must be positive")

    @property
    def z_step_mm(self) -> float:
        return self.sweep_rate_mm_s * self.slice_time_s

    def z_positions(self) -> np.ndarray:
        return self.z_start_mm + np.arange(self.n_slices) * self.z_step_mm

    def acq_times(self) -> np.ndarray:
        return np.arange(self.n_slices) * self.slice_time_s


def default_shapes(dims, spacing) -> list:
    """Body ellipsoid, two organs and a bright diaphragm-like shell."""
    cx = 0.5 * (dims[0] - 1) * spacing[0]
    cy = 0.5 * (dims[1] - 1) * spacing[1]
    cz = 0.5 * (dims[2] - 1) * spacing[2]
    ex = dims[0] * spacing[0]
    ez = dims[2] * spacing[2]
    return [
        Shape("ellipsoid", (cx, cy, cz), (0.42 * ex, 0.42 * ex, 0.46 * ez), 0.35),
        Shape("ellipsoid", (cx - 0.15 * ex, cy, cz + 0.18 * ez),
              (0.13 * ex, 0.11 * ex, 0.12 * ez), 0.45),
        Shape("ellipsoid", (cx + 0.14 * ex, cy + 0.05 * ex, cz - 0.16 * ez),
              (0.10 * ex, 0.12 * ex, 0.10 * ez), 0.25),
        # bright diaphragm-like shell in the moving region
        Shape("shell", (cx, cy, cz - 0.05 * ez),
              (0.30 * ex, 0.30 * ex, 0.16 * ez), 0.65,
              inner_radii=(0.24 * ex, 0.24 * ex, 0.11 * ez)),
    ]


def _grids_mm(dims, spacing):
    nx, ny, nz = dims
    x = np.arange(nx) * spacing[0]
    y = np.arange(ny) * spacing[1]
    z = np.arange(nz) * spacing[2]
    return np.meshgrid(z, y, x, indexing="ij")  # zz, yy, xx each (nz, ny, nx)


def make_phantom(spec: PhantomSpec) -> tuple[Volume3D, dict]:
    """Deterministic anatomical phantom plus its analytic description."""
    nx, ny, nz = spec.dims
    zz, yy, xx = _grids_mm(spec.dims, spec.spacing)
    data = np.zeros((nz, ny, nx), dtype=np.float64)
    for s in spec.shapes:
        cxm, cym, czm = s.center
        rx, ry, rz = s.radii
        if max(cxm, cym, czm) > max(nx * spec.spacing[0], ny * spec.spacing[1],
                                    nz * spec.spacing[2]):
            raise DataError(f"shape centre {s.center} outside the grid")
        if s.kind in ("ellipsoid", "shell"):
            mask = (((xx - cxm) / rx) ** 2 + ((yy - cym) / ry) ** 2
                    + ((zz - czm) / rz) ** 2) <= 1.0
            if s.kind == "shell":
                irx, iry, irz = s.inner_radii
                mask &= (((xx - cxm) / irx) ** 2 + ((yy - cym) / iry) ** 2
                         + ((zz - czm) / irz) ** 2) > 1.0
        else:
            mask = ((np.abs(xx - cxm) <= rx) & (np.abs(yy - cym) <= ry)
                    & (np.abs(zz - czm) <= rz))
        data[mask] += s.intensity
    if spec.texture_amplitude > 0 and spec.shapes:
        rng = np.random.default_rng(spec.seed)
        noise = rng.standard_normal((nz, ny, nx))
        sig = spec.texture_scale_mm / np.array(
            [spec.spacing[2], spec.spacing[1], spec.spacing[0]])
        texture = ndimage.gaussian_filter(noise, sigma=sig)
        std = texture.std()
        if std > 0:
            texture = texture / std * spec.texture_amplitude
        data = np.clip(data + texture * (data > 0), 0.0, None)
    data = np.clip(data, 0.0, None)
    description = {
        "dims": list(spec.dims),
        "spacing": list(spec.spacing),
        "shapes": [
            {"kind": s.kind, "center": list(s.center), "radii": list(s.radii),
             "intensity": s.intensity,
             **({"inner_radii": list(s.inner_radii)} if s.inner_radii else {})}
            for s in spec.shapes
        ],
        "texture_amplitude": spec.texture_amplitude,
        "seed": spec.seed,
    }
    vol = Volume3D(data.astype(np.float32), spec.spacing, (0.0, 0.0, 0.0))
    return vol, description


# ---------------------------------------------------------------------------
# deformation


def _moving_envelope(dims, spacing):
    """Smooth 0..1 envelope of the breathing displacement field.

    The whole central column (in-plane core around the body axis) translates
    with the diaphragm, so every acquired slice carries breathing signal;
    the in-plane periphery stays static.  Gaussian falloff between the two.
    """
    zz, yy, xx = _grids_mm(dims, spacing)
    ex = dims[0] * spacing[0]
    cxm = 0.5 * (dims[0] - 1) * spacing[0]
    cym = 0.5 * (dims[1] - 1) * spacing[1]
    r = np.sqrt((xx - cxm) ** 2 + (yy - cym) ** 2)
    core = 0.30 * ex
    falloff = 0.06 * ex
    env = np.ones_like(r)
    outside = r > core
    env[outside] = np.exp(-0.5 * ((r[outside] - core) / falloff) ** 2)
    return env


def displacement_field(volume: Volume3D, model: BreathingModel, level: float):
    """Per-voxel (dz, dy, dx) displacement in mm at the given level."""
    dims = (volume.nx, volume.ny, volume.nz)
    env = _moving_envelope(dims, volume.spacing)
    a = float(model.displacement_scale(level))
    dz = a * model.amp_mm * env
    if model.shell_scale != 0.0:
        zz, yy, xx = _grids_mm(dims, volume.spacing)
        ex = dims[0] * volume.spacing[0]
        ez = dims[2] * volume.spacing[2]
        cxm = 0.5 * (dims[0] - 1) * volume.spacing[0]
        cym = 0.5 * (dims[1] - 1) * volume.spacing[1]
        czm = 0.5 * (dims[2] - 1) * volume.spacing[2] - 0.05 * ez
        rr = np.sqrt((xx - cxm) ** 2 + (yy - cym) ** 2 + (zz - czm) ** 2)
        shell_r = 0.27 * ex
        band = np.exp(-0.5 * ((rr - shell_r) / (0.08 * ex)) ** 2)
        safe_r = np.where(rr > 1e-9, rr, 1.0)
        factor = a * model.shell_scale * band / safe_r
        return (dz + factor * (zz - czm) * shell_r,
                factor * (yy - cym) * shell_r,
                factor * (xx - cxm) * shell_r)
    zeros = np.zeros_like(dz)
    return dz, zeros, zeros


def deform(volume: Volume3D, model: BreathingModel, t: float) -> Volume3D:
    """Warp the volume to the breathing level at time t (trilinear)."""
    level = float(model.level(t))
    return deform_at_level(volume, model, level)


def deform_at_level(volume: Volume3D, model: BreathingModel, level: float) -> Volume3D:
    if model.displacement_scale(level) == 0.0 or (
            model.amp_mm == 0.0 and model.shell_scale == 0.0):
        return volume
    dz, dy, dx = displacement_field(volume, model, level)
    nz, ny, nx = volume.data.shape
    zi, yi, xi = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx),
                             indexing="ij")
    coords = np.stack([
        zi - dz / volume.spacing[2],
        yi - dy / volume.spacing[1],
        xi - dx / volume.spacing[0],
    ])
    warped = ndimage.map_coordinates(volume.data.astype(np.float64), coords,
                                     order=1, mode="nearest")
    return Volume3D(warped.astype(np.float32), volume.spacing, volume.origin)


def moving_region_mask(volume: Volume3D, model: BreathingModel,
                       min_voxels: float = 0.3) -> np.ndarray:
    """Voxels whose peak displacement exceeds ``min_voxels`` voxel lengths.

    Grown by one voxel so boundary intensity changes count as 'moving'.
    """
    dz, dy, dx = displacement_field(volume, model, 1.0 - _PHASE_EPS)
    mag_vox = np.sqrt((dz / volume.spacing[2]) ** 2 + (dy / volume.spacing[1]) ** 2
                      + (dx / volume.spacing[0]) ** 2)
    mask = mag_vox > min_voxels
    return ndimage.binary_dilation(mask, iterations=2)


# ---------------------------------------------------------------------------
# acquisition


def _psf_weights(z_slice, z_coords, psf: PsfSpec):
    d = z_coords - z_slice
    w = np.exp(-0.5 * (d / psf.sigma_mm) ** 2)
    w[np.abs(d) > psf.truncation_sigma * psf.sigma_mm] = 0.0
    total = w.sum()
    if total <= 0:
        raise DataError("slice position outside the volume's PSF support")
    return w / total


def _sample_slice(volume_data, z_coords, z_slice, psf):
    w = _psf_weights(z_slice, z_coords, psf)
    nzr = np.nonzero(w)[0]
    return np.tensordot(w[nzr], volume_data[nzr], axes=(0, 0))


def acquire_sweep(volume: Volume3D, breathing: BreathingModel,
                  acq: AcquisitionSpec, num_states: int = 10
                  ) -> tuple[SliceStack, RespiratoryLabeling]:
    """Sequential sweep through the breathing volume.

    Slice k is sampled at z_k through the Gaussian PSF from the volume
    deformed to the breathing level at time k * slice_time; the ground-truth
    state is floor(level * K).
    """
    psf = PsfSpec(fwhm_mm=acq.slice_thickness_mm)
    z_pos = acq.z_positions()
    times = acq.acq_times()
    zc = volume.z_coords
    if z_pos[0] < zc[0] - psf.truncation_sigma * psf.sigma_mm or \
            z_pos[-1] > zc[-1] + psf.truncation_sigma * psf.sigma_mm:
        raise DataError("sweep range exceeds the volume's z extent")
    levels = breathing.level(times)
    rng = np.random.default_rng(acq.seed)
    slices = np.empty((acq.n_slices, volume.ny, volume.nx), dtype=np.float64)

    # deforming once per distinct level saves a lot of work when the
    # breathing samples repeat (noise-free regression configs)
    cache: dict[float, np.ndarray] = {}
    for k in range(acq.n_slices):
        lv = float(levels[k])
        key = round(lv, 9)
        if key not in cache:
            cache[key] = deform_at_level(volume, breathing, lv).data.astype(np.float64)
            if len(cache) > 64:
                cache.pop(next(iter(cache)))
        slices[k] = _sample_slice(cache[key], zc, z_pos[k], psf)
    if acq.noise_sigma > 0:
        dyn = slices.max() - slices.min()
        slices += rng.normal(0.0, acq.noise_sigma * dyn, size=slices.shape)
        slices = np.clip(slices, 0.0, None)
    stack = SliceStack(
        data=slices.astype(np.float32),
        dx=volume.spacing[0],
        dy=volume.spacing[1],
        z_positions=z_pos,
        acq_times=times,
        slice_thickness=acq.slice_thickness_mm,
    )
    states = np.floor(levels * num_states).astype(int)
    labeling = RespiratoryLabeling(states=states, num_states=num_states,
                                   phase=levels, source="ground_truth")
    return stack, labeling


def make_table1_dataset(phantom_spec: PhantomSpec | None = None, K: int = 5,
                        cycles: int = 16, slices_per_state: int = 4,
                        period_jitter: float = 0.15,
                        amp_range: tuple = (0.85, 1.0),
                        drift_amp: float = 0.0,
                        hold_prob: float = 0.0,
                        hold_len: tuple = (0.5, 1.5),
                        tempo_factors: tuple = (1.0,),
                        tempo_run_cycles: tuple = (3, 6),
                        seed: int = 0,
                        acq: AcquisitionSpec | None = None,
                        breathing: BreathingModel | None = None
                        ) -> tuple[SliceStack, RespiratoryLabeling, dict]:
    """Irregular-breathing dataset for the classification study.

    The respiratory trace is a sinusoid whose period varies by up to
    ``period_jitter`` (fractional) and whose depth is drawn from
    ``amp_range`` independently for every cycle, riding on a slow baseline
    drift of up to ``drift_amp`` — the ingredients that defeat peak
    analysis on real recordings.  Each slice is sampled through the PSF
    from the phantom deformed to that instant's continuous level; the
    ground-truth state is the amplitude bin floor(level * K).  The nominal
    period is
    ``2 * K * slices_per_state`` slices and the stack starts at a seeded
    random point in the first cycle.  Returns
    (stack, exact labels, provenance).
    """
    if K < 2:
        raise ConfigError("K must be >= 2")
    if not (0 <= period_jitter < 0.5):
        raise ConfigError("period_jitter must be in [0, 0.5)")
    lo_amp, hi_amp = amp_range
    if not (0 < lo_amp <= hi_amp <= 1.0):
        raise ConfigError("amp_range must satisfy 0 < lo <= hi <= 1")
    if drift_amp < 0:
        raise ConfigError("drift_amp must be non-negative")
    if not (0 <= hold_prob <= 1):
        raise ConfigError("hold_prob must be in [0, 1]")
    if not tempo_factors or min(tempo_factors) <= 0:
        raise ConfigError("tempo_factors must be positive")
    if tempo_run_cycles[0] < 1 or tempo_run_cycles[0] > tempo_run_cycles[1]:
        raise ConfigError("tempo_run_cycles must be an increasing range >= 1")
    # the classification study does not need full in-plane resolution, and
    # per-slice continuous deformation scales with voxel count
    spec = phantom_spec or PhantomSpec(dims=(48, 48, 120), seed=seed)
    model = breathing or BreathingModel(seed=seed)
    volume, _ = make_phantom(spec)

    rng = np.random.default_rng(seed)
    base_period = 2 * K * slices_per_state
    n_slices = cycles * base_period
    start = int(rng.integers(0, base_period))
    pieces = []
    total = 0
    tempo = 1.0
    run_left = 0
    while total < start + n_slices:
        if len(tempo_factors) > 1:
            # breathing rate switches between sustained runs of cycles, the
            # way real subjects drift between rest and arousal
            if run_left == 0:
                tempo = float(tempo_factors[rng.integers(len(tempo_factors))])
                run_left = int(rng.integers(tempo_run_cycles[0],
                                            tempo_run_cycles[1] + 1))
            run_left -= 1
        else:
            tempo = float(tempo_factors[0])
        period = max(8, int(round(base_period * tempo *
                                  (1.0 + rng.uniform(-period_jitter,
                                                     period_jitter)))))
        depth = rng.uniform(lo_amp, hi_amp)
        cycle = depth * (0.5 - 0.5 * np.cos(
            2.0 * np.pi * np.arange(period) / period))
        pieces.append(cycle)
        total += period
        if hold_prob > 0 and rng.uniform() < hold_prob:
            # end-expiratory pause: breathing stays at the exhale level for
            # a sizeable fraction of a cycle before the next breath
            pause = int(round(base_period * rng.uniform(*hold_len)))
            if pause > 0:
                pieces.append(np.zeros(pause))
                total += pause
    level_trace = np.concatenate(pieces)[start:start + n_slices]
    if drift_amp > 0:
        # slow baseline wander: smoothed random walk, invisible inside any
        # single classification window but spanning several cycles
        walk = np.cumsum(rng.normal(size=n_slices))
        walk = ndimage.gaussian_filter1d(walk, 2.0 * base_period)
        span = np.abs(walk).max()
        if span > 0:
            level_trace = level_trace + drift_amp * walk / span
    level_trace = np.clip(level_trace, 0.0, 1.0 - _PHASE_EPS)
    states = np.floor(level_trace * K).astype(int)

    if acq is None:
        # keep the sweep slow relative to the breathing motion (a fast sweep
        # mixes z-anatomy change into the respiratory NCC signal) and center
        # the swept span in the volume
        default_rate = 0.17
        span = n_slices * 0.490 * default_rate
        extent_z = spec.dims[2] * spec.spacing[2]
        acq = AcquisitionSpec(
            n_slices=n_slices,
            sweep_rate_mm_s=default_rate,
            z_start_mm=max(0.5 * (extent_z - span), 0.0),
            noise_sigma=0.02,
            seed=seed,
        )
    if acq.n_slices != n_slices:
        raise ConfigError("acquisition slice count must match the cycle layout")
    psf = PsfSpec(fwhm_mm=acq.slice_thickness_mm)
    zc = volume.z_coords
    z_pos = acq.z_positions()
    slices = np.empty((n_slices, volume.ny, volume.nx), dtype=np.float64)
    for k in range(n_slices):
        deformed = deform_at_level(volume, model, float(level_trace[k]))
        slices[k] = _sample_slice(deformed.data.astype(np.float64),
                                  zc, z_pos[k], psf)
    if acq.noise_sigma > 0:
        dyn = slices.max() - slices.min()
        slices += rng.normal(0.0, acq.noise_sigma * dyn, size=slices.shape)
        slices = np.clip(slices, 0.0, None)
    stack = SliceStack(
        data=slices.astype(np.float32),
        dx=spec.spacing[0],
        dy=spec.spacing[1],
        z_positions=z_pos,
        acq_times=acq.acq_times(),
        slice_thickness=acq.slice_thickness_mm,
    )
    labeling = RespiratoryLabeling(
        states=states, num_states=K,
        phase=level_trace, source="ground_truth",
    )
    provenance = {
        "K": K,
        "cycles": cycles,
        "slices_per_state": slices_per_state,
        "period_jitter": period_jitter,
        "amp_range": [float(lo_amp), float(hi_amp)],
        "drift_amp": float(drift_amp),
        "hold_prob": float(hold_prob),
        "tempo_factors": [float(f) for f in tempo_factors],
        "seed": seed,
        "start_offset": start,
        "n_slices": n_slices,
        "noise_sigma": acq.noise_sigma,
    }
    return stack, labeling, provenance
