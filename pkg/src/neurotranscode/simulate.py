"""Synthetic simultaneous EEG-fMRI with complete ground truth.

Latent activity is a sum of factored region terms g_r(voxel) * s_r(t): a
spatial Gaussian bump times a stimulus-driven time course at 500 Hz. Both
measurement renderers and every evaluation-side ground-truth view can be
computed from the factors without materializing the full [X,Y,Z,T] array,
which is what keeps study-scale generation cheap.

fMRI rendering is HRF convolution followed by a mean over each TR window
(not point sampling), matching the block-mean conventions used everywhere
else. The native fMRI grid is the coarse source grid replicated by the
spatial factor, so spatial block-means invert the replication exactly.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.signal import fftconvolve
from scipy.special import gammaln

from .datamodel import (
    DataError,
    EegRecording,
    EEG_GRID,
    EEG_RATE_HZ,
    FmriRecording,
    StimulusSchedule,
    VolumeLayout,
    block_mean_time,
    epoch_extract,
    replicate_space,
)


class SourceSpace:
    def __init__(self, activity, sample_rate_hz, voxel_size_mm=(2.0, 2.0, 2.0)):
        activity = np.asarray(activity)
        if activity.ndim != 4:
            raise DataError(f"source activity must be [X,Y,Z,T], got {activity.shape}")
        self.activity = activity
        self.sample_rate_hz = float(sample_rate_hz)
        self.voxel_size_mm = tuple(float(v) for v in voxel_size_mm)


def _rng(seed):
    return np.random.default_rng(seed)


def _seed_seq(seed):
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(int(seed))


def generate_schedule(duration_s, iti_range=(2.0, 3.0), p_oddball=0.2,
                      stimulus_ms=200, seed=0):
    """Jittered event stream: ITI ~ U(iti_range), oddballs with p_oddball."""
    lo, hi = iti_range
    if duration_s <= hi:
        raise DataError("duration must exceed the maximum ITI")
    rng = _rng(seed)
    events = []
    t = float(rng.uniform(lo, hi))
    stim_s = stimulus_ms / 1000.0
    while t + stim_s <= duration_s:
        kind = "oddball" if rng.uniform() < p_oddball else "standard"
        events.append((t, kind))
        t += float(rng.uniform(lo, hi))
    return StimulusSchedule(events, duration_s)


def synth_hrf(peak_s=5.0, undershoot_s=15.0, length_s=25.0, dt=0.002,
              undershoot_ratio=1.0 / 6.0):
    """Double-gamma hemodynamic kernel, peak normalized to 1, h(0) = 0."""
    if dt <= 0:
        raise DataError("dt must be positive")
    t = np.arange(0.0, length_s, dt)

    def gamma_density(a):
        out = np.zeros_like(t)
        pos = t > 0
        tp = t[pos]
        out[pos] = np.exp((a - 1) * np.log(tp) - tp - gammaln(a))
        return out

    h = gamma_density(peak_s + 1.0) - undershoot_ratio * gamma_density(undershoot_s + 1.0)
    return h / h.max()


class Region:
    """One latent generator: Gaussian spatial gain times an evoked response."""

    def __init__(self, center, sigma_vox, response, gain_standard=1.0,
                 gain_oddball=1.0):
        self.center = tuple(float(c) for c in center)
        self.sigma_vox = float(sigma_vox)
        self.response = np.asarray(response, dtype=float)
        self.gain_standard = float(gain_standard)
        self.gain_oddball = float(gain_oddball)

    def gains(self, grid):
        for c, extent in zip(self.center, grid):
            if not (0 <= c < extent):
                raise DataError(f"region center {self.center} outside grid {grid}")
        axes = np.indices(grid, dtype=float)
        d2 = sum((ax - c) ** 2 for ax, c in zip(axes, self.center))
        if self.sigma_vox == 0:
            g = np.zeros(grid)
            g[tuple(int(round(c)) for c in self.center)] = 1.0
            return g
        return np.exp(-d2 / (2.0 * self.sigma_vox**2))

    def series(self, schedule, n_samples, rate_hz=EEG_RATE_HZ):
        train = np.zeros(n_samples)
        for onset, kind in schedule.events:
            i = round(onset * rate_hz)
            if 0 <= i < n_samples:
                train[i] += self.gain_oddball if kind == "oddball" else self.gain_standard
        if len(self.response) > 1:
            return fftconvolve(train, self.response)[:n_samples]
        return train * self.response[0]


def evoked_response(width_s, delay_s, rate_hz=EEG_RATE_HZ, sign=1.0):
    """Gaussian bump of unit peak at `delay_s`, truncated at 4 sigma."""
    half = 4.0 * width_s
    t = np.arange(0.0, delay_s + half, 1.0 / rate_hz)
    return sign * np.exp(-0.5 * ((t - delay_s) / width_s) ** 2)


def background_fields(grid, count, seed=0, smooth_vox=1.5):
    """Spatially smooth random gain maps, one per component, max |gain| 1.

    These model ongoing activity that is not stimulus locked: each component
    pairs one map with a band-limited noise time course (see GroundTruth).
    """
    grid = tuple(grid)
    rng = _rng(seed)
    maps = []
    for _ in range(count):
        g = gaussian_filter(rng.standard_normal(grid), smooth_vox, mode="nearest")
        maps.append(g / np.abs(g).max())
    if not maps:
        return np.zeros((0,) + grid)
    return np.stack(maps)


def generate_sources(schedule, grid, regions, seed=0, baseline_sd=0.0,
                     duration_s=None, rate_hz=EEG_RATE_HZ):
    """Materialized SourceSpace: sum of region factors plus optional noise."""
    duration = schedule.duration_seconds if duration_s is None else duration_s
    T = round(duration * rate_hz)
    activity = np.zeros(grid + (T,))
    for region in regions:
        g = region.gains(grid)
        s = region.series(schedule, T, rate_hz)
        activity += g[..., None] * s
    if baseline_sd > 0:
        activity += _rng(seed).normal(0.0, baseline_sd, activity.shape)
    return SourceSpace(activity, rate_hz)


def render_fmri(source, hrf, tr=2.1, noise_sd=0.0, seed=0):
    """Per-voxel HRF convolution, then the mean over each whole TR window."""
    flat = source.activity.reshape(-1, source.activity.shape[-1])
    spf = round(tr * source.sample_rate_hz)
    bold = fftconvolve(flat, np.asarray(hrf)[None, :], axes=-1)[:, : flat.shape[-1]]
    frames = block_mean_time(bold, spf)
    if noise_sd > 0:
        frames = frames + _rng(seed).normal(0.0, noise_sd, frames.shape)
    vols = frames.reshape(source.activity.shape[:3] + (frames.shape[-1],))
    return FmriRecording(vols, tr)


def render_eeg(source, leadfield, layout, noise_sd=0.0, seed=0):
    """Instantaneous mixing: channel c = sum_v leadfield[c, v] * source[v, t]."""
    flat = source.activity.reshape(-1, source.activity.shape[-1])
    leadfield = np.asarray(leadfield)
    if leadfield.shape[1] != flat.shape[0]:
        raise DataError(
            f"leadfield columns {leadfield.shape[1]} vs {flat.shape[0]} voxels"
        )
    samples = leadfield @ flat
    if noise_sd > 0:
        samples = samples + _rng(seed).normal(0.0, noise_sd, samples.shape)
    return EegRecording(samples, source.sample_rate_hz, layout)


def synth_leadfield(layout, source_grid, spread_mm=12.0, seed=0,
                    voxel_size_mm=(3.0, 3.0, 3.0), gain_jitter=0.0):
    """Gaussian-bump gains from layout positions into the source grid.

    Each channel's row is exp(-(d/spread)^2) around its position mapped
    proportionally into the source grid, optionally jittered, then
    normalized to unit sum.
    """
    if spread_mm <= 0:
        raise DataError("spread must be positive")
    grid = tuple(source_grid)
    axes = np.indices(grid, dtype=float)
    rng = _rng(seed)
    rows = np.empty((layout.channel_count, int(np.prod(grid))))
    for c in range(layout.channel_count):
        pos = layout.mapping[c]
        center = [(p + 0.5) / e * g - 0.5
                  for p, e, g in zip(pos, layout.grid, grid)]
        d2 = sum(((ax - ctr) * vs) ** 2
                 for ax, ctr, vs in zip(axes, center, voxel_size_mm))
        row = np.exp(-d2 / spread_mm**2).ravel()
        if gain_jitter > 0:
            row = row * rng.uniform(1.0 - gain_jitter, 1.0 + gain_jitter, row.size)
        rows[c] = row / row.sum()
    return rows


def default_layout():
    """63 channels on five shrinking rectangular rings, outermost at z=0."""
    rings = [
        ((0, 0), 18),
        ((1, 1), 16),
        ((2, 2), 12),
        ((3, 2), 10),
        ((4, 3), 7),
    ]
    mapping = {}
    chan = 0
    for z, ((ix, iy), count) in enumerate(rings):
        cells = _rect_ring(EEG_GRID[0], EEG_GRID[1], ix, iy)
        picks = [round(i * len(cells) / count) for i in range(count)]
        for p in picks:
            x, y = cells[p]
            mapping[chan] = (x, y, z)
            chan += 1
    return VolumeLayout(EEG_GRID, mapping)


def _rect_ring(nx, ny, inset_x, inset_y):
    """Perimeter cells of an inset rectangle, walked in order."""
    x0, x1 = inset_x, nx - 1 - inset_x
    y0, y1 = inset_y, ny - 1 - inset_y
    if x0 > x1 or y0 > y1:
        raise DataError("ring inset exhausts the grid")
    cells = [(x, y0) for x in range(x0, x1 + 1)]
    cells += [(x1, y) for y in range(y0 + 1, y1 + 1)]
    if y1 > y0:
        cells += [(x, y1) for x in range(x1 - 1, x0 - 1, -1)]
    if x1 > x0:
        cells += [(x0, y) for y in range(y1 - 1, y0, -1)]
    return cells


# ---------------------------------------------------------------------------
# study-level generation (factored ground truth)
# ---------------------------------------------------------------------------


class GroundTruth:
    """Everything the simulator knows about one session.

    Holds the region factors rather than the dense source array; dense
    views are materialized on demand at whichever resolution a consumer
    needs.
    """

    def __init__(self, schedule, regions, coarse_grid, spatial_factor, hrf,
                 leadfield, layout, rate_hz=EEG_RATE_HZ, background_gains=None,
                 background_sd=0.0, background_seed=0, background_block=175):
        self.schedule = schedule
        self.regions = list(regions)
        self.coarse_grid = tuple(coarse_grid)
        self.spatial_factor = int(spatial_factor)
        self.hrf = np.asarray(hrf)
        self.leadfield = np.asarray(leadfield)
        self.layout = layout
        self.rate_hz = float(rate_hz)
        self.n_samples = round(schedule.duration_seconds * rate_hz)
        self.n_evoked = len(self.regions)
        self._gains = np.stack([r.gains(self.coarse_grid) for r in self.regions])
        self._series = np.stack(
            [r.series(schedule, self.n_samples, rate_hz) for r in self.regions]
        )
        if background_gains is not None and len(background_gains):
            bg = np.asarray(background_gains)
            if bg.shape[1:] != self.coarse_grid:
                raise DataError(
                    f"background gain grid {bg.shape[1:]} vs {self.coarse_grid}"
                )
            # held constant over each block so the training-rate view of the
            # background is exactly its own white sequence
            block = int(background_block)
            n_blocks = -(-self.n_samples // block)
            steps = _rng(background_seed).normal(
                0.0, background_sd, (bg.shape[0], n_blocks))
            series = np.repeat(steps, block, axis=1)[:, : self.n_samples]
            self._gains = np.concatenate([self._gains, bg])
            self._series = np.concatenate([self._series, series])

    @property
    def native_grid(self):
        return tuple(g * self.spatial_factor for g in self.coarse_grid)

    def source(self):
        """Dense coarse-grid source at 500 Hz. Large; prefer the views below."""
        activity = np.tensordot(self._gains, self._series, axes=([0], [0]))
        return SourceSpace(activity, self.rate_hz)

    def source_training_res(self, time_factor=175):
        """Coarse grid at the block-meaned training rate."""
        series = block_mean_time(self._series, time_factor)
        return np.tensordot(self._gains, series, axes=([0], [0]))

    def source_epoch_mean(self, kind=None, window_ms=None, native=True):
        """Event-locked mean of the source on the requested grid at 500 Hz."""
        kwargs = {} if window_ms is None else {"window_ms": window_ms}
        epochs = epoch_extract(self._series, self.schedule, kind=kind, **kwargs)
        series = epochs.mean()
        gains = self._gains
        if native:
            gains = np.stack(
                [replicate_space(g, self.spatial_factor) for g in gains]
            )
        return np.tensordot(gains, series, axes=([0], [0]))

    def render(self, tr=2.1, noise_sd_eeg=0.0, noise_sd_fmri=0.0, seed=0):
        """One (EegRecording, FmriRecording) pair from the factors."""
        rng = _seed_seq(seed).spawn(2)
        spf = round(tr * self.rate_hz)
        hrf_series = fftconvolve(
            self._series, self.hrf[None, :], axes=-1
        )[:, : self.n_samples]
        frames = block_mean_time(hrf_series, spf)
        gains_flat = self._gains.reshape(self._gains.shape[0], -1)
        coarse = np.tensordot(gains_flat, frames, axes=([0], [0]))
        native = replicate_space(
            coarse.reshape(self.coarse_grid + (frames.shape[-1],)),
            self.spatial_factor,
        )
        if noise_sd_fmri > 0:
            native = native + _rng(rng[0]).normal(0.0, noise_sd_fmri, native.shape)
        fmri = FmriRecording(native, tr)

        chan_gain = self.leadfield @ gains_flat.T
        samples = chan_gain @ self._series
        if noise_sd_eeg > 0:
            samples = samples + _rng(rng[1]).normal(0.0, noise_sd_eeg, samples.shape)
        eeg = EegRecording(samples, self.rate_hz, self.layout)
        return eeg, fmri

    def active_mask(self, rel_threshold=0.25):
        """Coarse-grid voxels whose total region gain is a sizable fraction
        of the strongest voxel's. Background components do not count; the
        mask marks where the evoked response lives."""
        gains = self._gains[: self.n_evoked] if self.n_evoked else self._gains
        total = np.abs(gains).sum(axis=0)
        return total > rel_threshold * total.max()


def world_regions(world, grid):
    """Region presets for the two study flavours.

    "smooth" favours broad sources with slow responses (recoverable through
    the hemodynamic low-pass); "sharp" uses compact sources with fast,
    staggered responses, where neither modality alone suffices.
    """
    gx, gy, gz = grid

    def at(fx, fy, fz):
        return (fx * (gx - 1), fy * (gy - 1), fz * (gz - 1))

    if world == "smooth":
        return [
            Region(at(0.30, 0.35, 0.45), 1.6, evoked_response(0.45, 0.55),
                   gain_standard=1.0, gain_oddball=1.6),
            Region(at(0.68, 0.55, 0.35), 1.8, evoked_response(0.60, 0.90),
                   gain_standard=0.8, gain_oddball=2.2),
            Region(at(0.45, 0.72, 0.68), 1.5, evoked_response(0.35, 0.40, sign=-1.0),
                   gain_standard=0.9, gain_oddball=0.5),
        ]
    if world == "sharp":
        return [
            Region(at(0.20, 0.25, 0.30), 0.9, evoked_response(0.12, 0.18),
                   gain_standard=1.0, gain_oddball=1.4),
            Region(at(0.75, 0.30, 0.55), 0.8, evoked_response(0.14, 0.35),
                   gain_standard=0.9, gain_oddball=2.0),
            Region(at(0.35, 0.70, 0.25), 0.8, evoked_response(0.10, 0.55, sign=-1.0),
                   gain_standard=0.8, gain_oddball=1.1),
            Region(at(0.60, 0.75, 0.75), 0.9, evoked_response(0.16, 0.75),
                   gain_standard=1.1, gain_oddball=0.6),
            Region(at(0.25, 0.50, 0.80), 0.8, evoked_response(0.12, 0.95),
                   gain_standard=0.7, gain_oddball=1.8),
        ]
    raise DataError(f"unknown world {world!r}")


# ---------------------------------------------------------------------------
# study generation and its manifest
# ---------------------------------------------------------------------------


def build_study(out_dir, subjects=2, sessions_per_subject=2, duration_s=210.0,
                world="smooth", coarse_grid=(8, 9, 8), spatial_factor=2,
                tr_seconds=2.1, noise_eeg=0.0, noise_fmri=0.0,
                iti_range=(2.0, 3.0), p_oddball=0.2, spread_mm=12.0,
                leadfield_jitter=0.15, background_components=4,
                background_sd=0.25, seed=0):
    """Generate a multi-subject synthetic study and write its manifest.

    Regions, HRF, leadfield, and layout are shared across the study (one
    head, one brain); schedules, background activity, and noise are per
    session. Ground truth is stored in factored form: factor gains once,
    factor time courses per session, plus a dense coarse source at training
    resolution. Background components are ongoing non-evoked activity that
    both modalities observe; set background_components=0 for stimulus-only
    sources.
    """
    from . import datamodel, storage

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(int(seed))
    ss_lead, ss_bg, ss_sessions = root.spawn(3)

    layout = default_layout()
    regions = world_regions(world, coarse_grid)
    hrf = synth_hrf(dt=1.0 / EEG_RATE_HZ)
    leadfield = synth_leadfield(layout, coarse_grid, spread_mm, seed=ss_lead,
                                gain_jitter=leadfield_jitter)
    bg_gains = background_fields(coarse_grid, background_components, seed=ss_bg)

    manifest = {
        "study.world": world,
        "study.coarse_grid": "{},{},{}".format(*coarse_grid),
        "study.spatial_factor": str(spatial_factor),
        "study.tr_seconds": repr(float(tr_seconds)),
        "study.rate_hz": repr(EEG_RATE_HZ),
        "study.seed": str(seed),
        "study.evoked_factors": str(len(regions)),
        "truth.hrf": "hrf.tnsr",
        "truth.leadfield": "leadfield.tnsr",
        "truth.gains": "gains.tnsr",
        "truth.layout": "layout.txt",
    }
    storage.save_tensor(out / "hrf.tnsr", hrf)
    storage.save_tensor(out / "leadfield.tnsr", leadfield)
    storage.save_mapping(out / "layout.txt", layout.mapping)
    gains = np.stack([r.gains(tuple(coarse_grid)) for r in regions])
    if len(bg_gains):
        gains = np.concatenate([gains, bg_gains])
    storage.save_tensor(out / "gains.tnsr", gains)
    written = [out / "hrf.tnsr", out / "leadfield.tnsr", out / "gains.tnsr",
               out / "layout.txt"]

    names = []
    children = ss_sessions.spawn(subjects * sessions_per_subject)
    idx = 0
    for si in range(subjects):
        subject = f"S{si + 1:02d}"
        for ki in range(sessions_per_subject):
            name = f"{subject}r{ki + 1}"
            names.append(name)
            ss = children[idx].spawn(3)
            idx += 1
            schedule = generate_schedule(duration_s, iti_range, p_oddball,
                                         seed=ss[0])
            gt = GroundTruth(schedule, regions, coarse_grid, spatial_factor,
                             hrf, leadfield, layout,
                             background_gains=bg_gains,
                             background_sd=background_sd,
                             background_seed=ss[2])
            eeg, fmri = gt.render(tr_seconds, noise_eeg, noise_fmri, seed=ss[1])

            datamodel.save_eeg(out / f"{name}.eeg.tnsr", eeg)
            datamodel.save_fmri(out / f"{name}.fmri.tnsr", fmri)
            datamodel.save_schedule(out / f"{name}.schedule.txt", schedule)
            storage.save_tensor(out / f"{name}.series.tnsr", gt._series)
            storage.save_tensor(out / f"{name}.source_coarse.tnsr",
                                gt.source_training_res())
            manifest[f"session.{name}.subject"] = subject
            manifest[f"session.{name}.eeg"] = f"{name}.eeg.tnsr"
            manifest[f"session.{name}.fmri"] = f"{name}.fmri.tnsr"
            manifest[f"session.{name}.schedule"] = f"{name}.schedule.txt"
            manifest[f"session.{name}.series"] = f"{name}.series.tnsr"
            manifest[f"session.{name}.source_coarse"] = f"{name}.source_coarse.tnsr"
            written += [
                out / f"{name}.eeg.tnsr", out / f"{name}.eeg.meta",
                out / f"{name}.eeg.layout",
                out / f"{name}.fmri.tnsr", out / f"{name}.fmri.meta",
                out / f"{name}.schedule.txt", out / f"{name}.series.tnsr",
                out / f"{name}.source_coarse.tnsr",
            ]
    manifest["study.sessions"] = ",".join(names)
    storage.save_kv(out / "manifest.txt", manifest)
    written.append(out / "manifest.txt")
    return out / "manifest.txt", written


class Study:
    """Loaded view of a study manifest; file paths resolve relative to it.

    Accepts either the manifest file or the study directory that holds it.
    """

    def __init__(self, manifest_path):
        from . import storage

        manifest_path = Path(manifest_path)
        if manifest_path.is_dir():
            manifest_path = manifest_path / "manifest.txt"
        self.root = manifest_path.parent
        self.raw = storage.load_kv(manifest_path)
        self.world = self.raw.get("study.world", "smooth")
        self.coarse_grid = tuple(
            int(v) for v in self.raw["study.coarse_grid"].split(","))
        self.spatial_factor = int(self.raw["study.spatial_factor"])
        self.tr_seconds = float(self.raw["study.tr_seconds"])
        self.rate_hz = float(self.raw.get("study.rate_hz", EEG_RATE_HZ))
        self.sessions = [s for s in self.raw["study.sessions"].split(",") if s]
        if not self.sessions:
            raise DataError("manifest lists no sessions")
        mapping = storage.load_mapping(self.root / self.raw["truth.layout"])
        self.layout = VolumeLayout(EEG_GRID, mapping)

    def path(self, key):
        return self.root / self.raw[key]

    def subject(self, name):
        return self.raw[f"session.{name}.subject"]

    def load_eeg(self, name):
        from . import datamodel
        return datamodel.load_eeg(self.path(f"session.{name}.eeg"))

    def load_fmri(self, name):
        from . import datamodel
        return datamodel.load_fmri(self.path(f"session.{name}.fmri"))

    def load_schedule(self, name):
        from . import datamodel
        return datamodel.load_schedule(self.path(f"session.{name}.schedule"))

    def load_truth(self, name):
        """GroundTruth for one session rebuilt from the stored factors."""
        from . import storage
        hrf = storage.load_tensor(self.path("truth.hrf")).astype(float)
        leadfield = storage.load_tensor(self.path("truth.leadfield")).astype(float)
        gains = storage.load_tensor(self.path("truth.gains")).astype(float)
        series = storage.load_tensor(
            self.path(f"session.{name}.series")).astype(float)
        schedule = self.load_schedule(name)
        gt = GroundTruth.__new__(GroundTruth)
        gt.schedule = schedule
        gt.regions = []
        gt.coarse_grid = self.coarse_grid
        gt.spatial_factor = self.spatial_factor
        gt.hrf = hrf
        gt.leadfield = leadfield
        gt.layout = self.layout
        gt.rate_hz = self.rate_hz
        gt.n_samples = series.shape[-1]
        gt.n_evoked = int(self.raw.get("study.evoked_factors", gains.shape[0]))
        gt._gains = gains
        gt._series = series
        return gt
