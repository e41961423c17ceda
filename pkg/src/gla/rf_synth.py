"""Synthetic FMCW radar scenes and labeled Range-Angle heatmaps.

Two generators produce the same kind of output:

* the signal chain: point-target ADC cube -> range/Doppler FFT -> MVDR
  angle spectrum per range cell;
* the image-level renderer, which paints Gaussian blobs and range bands
  directly into the RA grid.

Both are pure functions of ``(scene, params)``; the scene carries its seed.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConditioningError, RangeBoundError, StructuralError, ValidationError
from .frames import (DatasetManifest, GroundTruth, ManifestEntry, RAFrame, canonical_digest,
                     normalize_frame, resize_frame, save_frame)

SPEED_OF_LIGHT = 299_792_458.0


@dataclass(frozen=True)
class RadarParams:
    """FMCW front end and processing grid.

    The defaults (8 rx, 64 chirps x 128 samples, 64 x 64 RA grid over
    +/-60 deg) are stand-ins for an unspecified single-chip 77 GHz sensor.
    """

    num_rx_antennas: int = 8
    antenna_spacing: float = 0.5
    num_chirps: int = 64
    samples_per_chirp: int = 128
    chirp_slope: float = 60e12
    sample_rate: float = 5e6
    carrier_wavelength: float = SPEED_OF_LIGHT / 77e9
    range_bins: int = 64
    angle_bins: int = 64
    angle_span: float = 60.0
    range_window: str = "hann"
    doppler_window: str = "rect"
    loading_factor: float = 1e-3

    def __post_init__(self):
        for name in ("num_rx_antennas", "num_chirps", "samples_per_chirp", "range_bins", "angle_bins"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.angle_bins < 3:
            raise ValidationError("angle_bins must be >= 3")
        if not 0 < self.antenna_spacing <= 1:
            raise ValidationError("antenna_spacing must lie in (0, 1] wavelengths")
        if self.range_bins > self.samples_per_chirp:
            raise ValidationError("range_bins cannot exceed samples_per_chirp")
        if not (self.chirp_slope > 0 and self.sample_rate > 0 and self.range_resolution > 0):
            raise ValidationError("chirp_slope and sample_rate must be positive")
        if not 0 < self.angle_span < 90:
            raise ValidationError("angle_span must lie in (0, 90) degrees")
        for name in ("range_window", "doppler_window"):
            if getattr(self, name) not in WINDOWS:
                raise ValidationError(f"{name} must be one of {sorted(WINDOWS)}")

    @property
    def range_resolution(self) -> float:
        """Metres per range bin: c * fs / (2 * S * N)."""
        return SPEED_OF_LIGHT * self.sample_rate / (2.0 * self.chirp_slope * self.samples_per_chirp)

    @property
    def max_range(self) -> float:
        return self.range_bins * self.range_resolution

    @property
    def angle_grid(self) -> np.ndarray:
        return np.linspace(-self.angle_span, self.angle_span, self.angle_bins)

    def range_of_bin(self, b: float) -> float:
        return float(b) * self.range_resolution

    def bin_of_range(self, r: float) -> float:
        return float(r) / self.range_resolution

    def angle_of_bin(self, b: float) -> float:
        step = 2.0 * self.angle_span / (self.angle_bins - 1)
        return -self.angle_span + float(b) * step

    def bin_of_angle(self, deg: float) -> float:
        step = 2.0 * self.angle_span / (self.angle_bins - 1)
        return (float(deg) + self.angle_span) / step

    def digest(self) -> str:
        return canonical_digest(self)

    def to_dict(self) -> dict:
        return asdict(self)


WINDOWS = {
    "rect": np.ones,
    "hann": lambda n: np.hanning(n + 1)[:-1] if n > 1 else np.ones(n),  # periodic Hann
    "hamming": lambda n: np.hamming(n + 1)[:-1] if n > 1 else np.ones(n),
}


@dataclass(frozen=True)
class PointTarget:
    range: float
    angle: float
    reflectivity: float


@dataclass(frozen=True)
class PersonTarget(PointTarget):
    radius_bins: float = 2.0


@dataclass(frozen=True)
class Band:
    range_bin: float
    amplitude: float
    thickness_bins: float = 1.0


@dataclass(frozen=True)
class SceneSpec:
    label: str = "empty"
    person_target: PersonTarget | None = None
    clutter_targets: tuple[PointTarget, ...] = ()
    multipath_bands: tuple[Band, ...] = ()
    noise_power: float = 0.0
    seed: int = 0

    def validate(self, params: RadarParams) -> None:
        if self.label not in ("empty", "person"):
            raise ValidationError(f"unknown label {self.label!r}")
        if (self.label == "person") != (self.person_target is not None):
            raise ValidationError("label 'person' requires a person_target and vice versa")
        if self.noise_power < 0:
            raise ValidationError("noise_power must be >= 0")
        targets = list(self.clutter_targets)
        if self.person_target is not None:
            targets.append(self.person_target)
            if self.person_target.radius_bins <= 0:
                raise ValidationError("person radius_bins must be positive")
        for t in targets:
            if t.reflectivity < 0:
                raise ValidationError("reflectivities must be >= 0")
            if not 0 <= t.range < params.max_range:
                raise RangeBoundError(
                    f"target range {t.range:.3f} m outside unambiguous range [0, {params.max_range:.3f}) m")
            if abs(t.angle) > 90:
                raise ValidationError(f"target angle {t.angle} outside [-90, 90] degrees")
        for b in self.multipath_bands:
            if b.amplitude < 0 or b.thickness_bins <= 0:
                raise ValidationError("band amplitude must be >= 0 and thickness > 0")
            if not 0 <= b.range_bin < params.range_bins:
                raise RangeBoundError(f"band at range bin {b.range_bin} outside [0, {params.range_bins})")

    def ground_truth(self, params: RadarParams) -> GroundTruth:
        if self.person_target is None:
            return GroundTruth("empty")
        p = self.person_target
        return GroundTruth("person", (params.bin_of_range(p.range), params.bin_of_angle(p.angle)),
                           float(p.radius_bins))


def steering_matrix(params: RadarParams, angles_deg=None) -> np.ndarray:
    """ULA steering vectors a(theta) as columns, shape [M, n_angles]."""
    theta = np.deg2rad(params.angle_grid if angles_deg is None else np.atleast_1d(angles_deg))
    m = np.arange(params.num_rx_antennas)[:, None]
    return np.exp(-2j * np.pi * params.antenna_spacing * m * np.sin(theta)[None, :])


PERSON_DOPPLER_BINS = (2.0, 8.0)


def simulate_adc(scene: SceneSpec, params: RadarParams) -> np.ndarray:
    """Complex beat-signal cube, shape [rx, chirps, samples].

    Band scatterers are spread over the angle grid at their range cells.
    Clutter and bands are static. The person carries a small slow-time
    Doppler offset (body micro-motion) drawn from ``PERSON_DOPPLER_BINS``;
    without it a person sharing a range cell with static clutter is
    coherent with it and the Capon beamformer nulls both.
    """
    scene.validate(params)
    rng = np.random.default_rng(scene.seed)
    M, K, N = params.num_rx_antennas, params.num_chirps, params.samples_per_chirp
    n = np.arange(N)
    m = np.arange(M)

    k = np.arange(K)
    scatterers = [(t.range, t.angle, t.reflectivity, 0.0) for t in scene.clutter_targets]
    if scene.person_target is not None:
        p = scene.person_target
        scatterers.append((p.range, p.angle, p.reflectivity, float(rng.uniform(*PERSON_DOPPLER_BINS))))
    for band in scene.multipath_bands:
        offsets = np.arange(-(band.thickness_bins - 1) / 2, (band.thickness_bins - 1) / 2 + 1e-9)
        for off in offsets:
            rb = min(max(band.range_bin + off, 0.0), params.range_bins - 1)
            for ang in params.angle_grid[::4]:
                scatterers.append((params.range_of_bin(rb), float(ang), band.amplitude, 0.0))

    cube = np.zeros((M, K, N), dtype=np.complex128)
    if scatterers:
        phases = rng.uniform(0.0, 2.0 * np.pi, size=len(scatterers))
        for (r, ang, amp, dop), phi in zip(scatterers, phases):
            if amp == 0:
                continue
            f_beat = 2.0 * params.chirp_slope * r / SPEED_OF_LIGHT
            fast = np.exp(2j * np.pi * f_beat * n / params.sample_rate)
            slow = np.exp(2j * np.pi * dop * k / K)
            spatial = np.exp(-2j * np.pi * params.antenna_spacing * m * np.sin(np.deg2rad(ang)))
            cube += (amp * np.exp(1j * phi)) * spatial[:, None, None] * slow[None, :, None] * fast[None, None, :]
    if scene.noise_power > 0:
        scale = math.sqrt(scene.noise_power / 2.0)
        cube += scale * (rng.standard_normal(cube.shape) + 1j * rng.standard_normal(cube.shape))
    return cube


def range_doppler_fft(cube, params: RadarParams | None = None, range_window: str | None = None,
                      doppler_window: str | None = None) -> np.ndarray:
    """FFT over fast time, then over chirps.

    Returns [rx, doppler, range] with all ``samples_per_chirp`` range bins;
    Doppler is not shifted, so zero velocity sits at index 0.
    """
    cube = np.asarray(cube)
    if cube.ndim != 3:
        raise StructuralError(f"cube must be [rx, chirps, samples], got shape {cube.shape}")
    if params is not None:
        expected = (params.num_rx_antennas, params.num_chirps, params.samples_per_chirp)
        if cube.shape != expected:
            raise StructuralError(f"cube shape {cube.shape} does not match params {expected}")
    rw = range_window or (params.range_window if params else "rect")
    dw = doppler_window or (params.doppler_window if params else "rect")
    _, K, N = cube.shape
    x = cube * WINDOWS[rw](N)[None, None, :]
    x = np.fft.fft(x, axis=2)
    x = x * WINDOWS[dw](K)[None, :, None]
    return np.fft.fft(x, axis=1)


def default_loading(R: np.ndarray, factor: float = 1e-3) -> float:
    M = R.shape[-1]
    return factor * float(np.real(np.trace(R, axis1=-2, axis2=-1)).max()) / M


def mvdr_from_covariance(R, params: RadarParams, loading: float | None = None) -> np.ndarray:
    """Capon spectrum 1 / (a^H (R + loading I)^-1 a) on the params angle grid."""
    R = np.asarray(R, dtype=np.complex128)
    M = params.num_rx_antennas
    if R.shape != (M, M):
        raise StructuralError(f"covariance must be {M}x{M}, got {R.shape}")
    if loading is None:
        loading = default_loading(R, params.loading_factor)
    if loading < 0:
        raise ValidationError("loading must be >= 0")
    Rl = R + loading * np.eye(M)
    if loading == 0 and np.linalg.cond(Rl) > 1.0 / np.finfo(float).eps:
        raise ConditioningError("sample covariance is singular; pass loading > 0 or more snapshots")
    A = steering_matrix(params)
    denom = np.real(np.sum(A.conj() * np.linalg.solve(Rl, A), axis=0))
    if np.any(denom <= 0) or not np.all(np.isfinite(denom)):
        raise ConditioningError("covariance is not positive definite after loading")
    return 1.0 / denom


def mvdr_angle_spectrum(snapshots, params: RadarParams, loading: float | None = None) -> np.ndarray:
    """MVDR power over ``params.angle_grid`` from snapshots shaped [rx, n_snapshots].

    ``loading=None`` uses ``params.loading_factor * trace(R) / M``.
    """
    X = np.asarray(snapshots)
    if X.ndim != 2 or X.shape[0] != params.num_rx_antennas:
        raise StructuralError(f"snapshots must be [{params.num_rx_antennas}, K], got {X.shape}")
    if X.shape[1] < 1:
        raise ValidationError("need at least one snapshot")
    R = X @ X.conj().T / X.shape[1]
    return mvdr_from_covariance(R, params, loading)


def signal_chain_ra(scene: SceneSpec, params: RadarParams) -> np.ndarray:
    """RA power map [range_bins, angle_bins] through ADC -> FFT -> MVDR."""
    rd = range_doppler_fft(simulate_adc(scene, params), params)[:, :, : params.range_bins]
    # snapshots for one range cell are its Doppler bins
    K = rd.shape[1]
    R = np.einsum("mkr,nkr->rmn", rd, rd.conj()) / K
    M = params.num_rx_antennas
    loading = params.loading_factor * np.real(np.trace(R, axis1=1, axis2=2)) / M
    tiny = np.finfo(float).tiny
    Rl = R + np.maximum(loading, tiny)[:, None, None] * np.eye(M)[None]
    A = steering_matrix(params)
    sol = np.linalg.solve(Rl, np.broadcast_to(A, (params.range_bins,) + A.shape))
    denom = np.real(np.einsum("ma,rma->ra", A.conj(), sol))
    return 1.0 / denom


def _gaussian_blob(h: int, w: int, center, radius: float, amplitude: float) -> np.ndarray:
    rr = np.arange(h)[:, None] - center[0]
    cc = np.arange(w)[None, :] - center[1]
    return amplitude * np.exp(-(rr ** 2 + cc ** 2) / (2.0 * radius ** 2))


CLUTTER_RADIUS_BINS = 1.0


def render_ra_image(scene: SceneSpec, params: RadarParams) -> np.ndarray:
    """Image-level RA intensity map [range_bins, angle_bins].

    Person and clutter targets are isotropic Gaussian blobs (peak =
    reflectivity), bands are Gaussian range profiles whose FWHM equals
    their thickness, and noise is exponential with mean ``noise_power``.
    """
    scene.validate(params)
    H, W = params.range_bins, params.angle_bins
    img = np.zeros((H, W))
    for t in scene.clutter_targets:
        c = (params.bin_of_range(t.range), params.bin_of_angle(t.angle))
        img += _gaussian_blob(H, W, c, CLUTTER_RADIUS_BINS, t.reflectivity)
    rows = np.arange(H)[:, None]
    for b in scene.multipath_bands:
        sigma = b.thickness_bins / (2.0 * math.sqrt(2.0 * math.log(2.0)))
        img += b.amplitude * np.exp(-((rows - b.range_bin) ** 2) / (2.0 * sigma ** 2))
    if scene.person_target is not None:
        p = scene.person_target
        c = (params.bin_of_range(p.range), params.bin_of_angle(p.angle))
        img += _gaussian_blob(H, W, c, p.radius_bins, p.reflectivity)
    if scene.noise_power > 0:
        rng = np.random.default_rng(scene.seed)
        img += rng.exponential(scene.noise_power, size=img.shape)
    return img


def synth_ra_image(scene: SceneSpec, params: RadarParams) -> tuple[RAFrame, GroundTruth]:
    img = render_ra_image(scene, params)
    gt = scene.ground_truth(params)
    frame = RAFrame(pixels=img[None].astype(np.float32), label=scene.label, ground_truth=gt,
                    meta={"seed": int(scene.seed), "mode": "image_level", "params_digest": params.digest(),
                          "normalization": "none"})
    return frame, gt


def synth_signal_chain(scene: SceneSpec, params: RadarParams) -> tuple[RAFrame, GroundTruth]:
    img = signal_chain_ra(scene, params)
    gt = scene.ground_truth(params)
    frame = RAFrame(pixels=img[None].astype(np.float32), label=scene.label, ground_truth=gt,
                    meta={"seed": int(scene.seed), "mode": "signal_chain", "params_digest": params.digest(),
                          "normalization": "none"})
    return frame, gt


# -- dataset generation ---------------------------------------------------------

@dataclass(frozen=True)
class SceneDistribution:
    """Sampling ranges for random scenes. Bin-valued ranges are inclusive."""

    person_reflectivity: tuple[float, float] = (0.8, 1.2)
    person_radius_bins: tuple[float, float] = (1.5, 3.0)
    person_margin_bins: int = 6
    n_clutter: int = 4
    clutter_reflectivity: tuple[float, float] = (0.15, 0.35)
    n_bands: int = 2
    band_amplitude: tuple[float, float] = (0.05, 0.15)
    band_thickness_bins: tuple[float, float] = (1.0, 3.0)
    noise_power: float = 0.01
    shared_clutter: bool = True
    clutter_jitter: float = 0.1

    def to_dict(self) -> dict:
        return asdict(self)


def _layout(dist: SceneDistribution, params: RadarParams, rng: np.random.Generator):
    clutter = []
    for _ in range(dist.n_clutter):
        rb = int(rng.integers(2, params.range_bins - 2))
        ab = int(rng.integers(2, params.angle_bins - 2))
        clutter.append(PointTarget(params.range_of_bin(rb), params.angle_of_bin(ab),
                                   float(rng.uniform(*dist.clutter_reflectivity))))
    bands = []
    for _ in range(dist.n_bands):
        bands.append(Band(float(rng.integers(2, params.range_bins - 2)), float(rng.uniform(*dist.band_amplitude)),
                          float(rng.uniform(*dist.band_thickness_bins))))
    return clutter, bands


def sample_scene(label: str, params: RadarParams, dist: SceneDistribution, seed: int,
                 layout=None) -> SceneSpec:
    """Draw one scene; ``layout`` is a shared (clutter, bands) pair or None for a per-frame one."""
    rng = np.random.default_rng(seed)
    clutter, bands = layout if layout is not None else _layout(dist, params, rng)
    if dist.clutter_jitter > 0:
        jit = rng.uniform(1 - dist.clutter_jitter, 1 + dist.clutter_jitter, size=len(clutter) + len(bands))
        clutter = [replace(c, reflectivity=c.reflectivity * float(j)) for c, j in zip(clutter, jit)]
        bands = [replace(b, amplitude=b.amplitude * float(j)) for b, j in zip(bands, jit[len(clutter):])]
    person = None
    if label == "person":
        mg = dist.person_margin_bins
        rb = int(rng.integers(mg, params.range_bins - mg))
        ab = int(rng.integers(mg, params.angle_bins - mg))
        person = PersonTarget(params.range_of_bin(rb), params.angle_of_bin(ab),
                              float(rng.uniform(*dist.person_reflectivity)),
                              radius_bins=float(rng.uniform(*dist.person_radius_bins)))
    noise_seed = int(rng.integers(0, 2 ** 31 - 1))
    return SceneSpec(label=label, person_target=person, clutter_targets=tuple(clutter),
                     multipath_bands=tuple(bands), noise_power=dist.noise_power, seed=noise_seed)


_CLASS_CODE = {"empty": 0, "person": 1}
_LAYOUT_STREAM = 2
_SPLIT_STREAM = 3


def frame_seed(master_seed: int, label: str, index: int) -> int:
    """Independent per-frame seed derived from (master seed, class, index)."""
    ss = np.random.SeedSequence([int(master_seed), _CLASS_CODE[label], int(index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _assign_splits(n: int, fractions, rng: np.random.Generator) -> list[str]:
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    order = rng.permutation(n)
    out = [""] * n
    for rank, i in enumerate(order):
        out[i] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
    return out


def generate_dataset(n_empty: int, n_person: int, params: RadarParams | None = None,
                     scene_distribution: SceneDistribution | None = None, mode: str = "image_level",
                     seed: int = 0, out_dir=".", resolution: tuple[int, int] | None = None,
                     split_fractions=(0.7, 0.15, 0.15)) -> DatasetManifest:
    """Render a labeled dataset to ``out_dir`` and write ``manifest.json`` there.

    Frames are min-max normalized single-channel images; splits are
    stratified per class.
    """
    if n_empty < 0 or n_person < 0:
        raise ValidationError("class counts must be >= 0")
    if mode not in ("signal_chain", "image_level"):
        raise ValidationError(f"mode must be 'signal_chain' or 'image_level', got {mode!r}")
    params = params or RadarParams()
    dist = scene_distribution or SceneDistribution()
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc

    layout = None
    if dist.shared_clutter:
        ss = np.random.SeedSequence([int(seed), _LAYOUT_STREAM])
        layout = _layout(dist, params, np.random.default_rng(ss))
    render = synth_signal_chain if mode == "signal_chain" else synth_ra_image
    split_rng = np.random.default_rng(np.random.SeedSequence([int(seed), _SPLIT_STREAM]))
    digest = params.digest()

    entries = []
    for label, count in (("empty", n_empty), ("person", n_person)):
        splits = _assign_splits(count, split_fractions, split_rng)
        for i in range(count):
            fseed = frame_seed(seed, label, i)
            scene = sample_scene(label, params, dist, fseed, layout)
            frame, gt = render(scene, params)
            raw = frame.pixels[0]
            pixels = normalize_frame(raw)
            if resolution is not None:
                pixels = resize_frame(pixels, resolution)
            rel = f"frames/{label}_{i:05d}"
            frame = frame.replace(pixels=pixels, source_id=f"{label}_{i:05d}",
                                  meta={**frame.meta, "seed": fseed, "normalization": {
                                      "method": "minmax", "raw_min": float(raw.min()),
                                      "raw_max": float(raw.max())}})
            save_frame(out_dir / rel, frame)
            entries.append(ManifestEntry(rel, label, gt, fseed, mode, splits[i]))

    manifest = DatasetManifest(
        entries=entries, params_digest=digest, params=params.to_dict(),
        split_fractions=tuple(split_fractions),
        info={"seed": int(seed), "mode": mode, "n_empty": n_empty, "n_person": n_person,
              "resolution": list(resolution) if resolution else [params.range_bins, params.angle_bins],
              "scene_distribution": dist.to_dict()},
        root=out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest


def params_from_dict(d: dict) -> RadarParams:
    return RadarParams(**d)
