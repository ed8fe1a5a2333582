"""Recording types and the resampling/layout/epoching transforms.

Conventions used throughout: time is the last axis of a series array, EEG
channel data is [C, T], volumes are [X, Y, Z, T]. A sample produced by
block-averaging represents the center of its block, which is what the
`block_center_times` helper encodes; keeping that bookkeeping in one place
is what makes the jittered-epoching reconstruction line up.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from . import storage
from .storage import FormatError

log = logging.getLogger(__name__)

EEG_RATE_HZ = 500.0
EEG_GRID = (11, 9, 5)
EPOCH_WINDOW_MS = (-350, 850)
EPOCH_SAMPLES = 600
EPOCH_ONSET_INDEX = 175


class DataError(ValueError):
    pass


class VolumeLayout:
    """Injective channel -> voxel assignment inside a small grid."""

    def __init__(self, grid, mapping):
        self.grid = tuple(int(g) for g in grid)
        self.mapping = dict(mapping)
        coords = list(self.mapping.values())
        if len(set(coords)) != len(coords):
            raise DataError("channel mapping is not injective")
        for c, (x, y, z) in self.mapping.items():
            if not (0 <= x < self.grid[0] and 0 <= y < self.grid[1]
                    and 0 <= z < self.grid[2]):
                raise DataError(f"channel {c} mapped outside grid: {(x, y, z)}")
        expect = set(range(len(self.mapping)))
        if set(self.mapping) != expect:
            raise DataError("channel indices must be 0..C-1 without gaps")

    @property
    def channel_count(self):
        return len(self.mapping)

    def flat_indices(self):
        """Row-major voxel index per channel, in channel order."""
        _, ny, nz = self.grid[0], self.grid[1], self.grid[2]
        idx = np.empty(self.channel_count, dtype=np.intp)
        for c in range(self.channel_count):
            x, y, z = self.mapping[c]
            idx[c] = (x * ny + y) * nz + z
        return idx


class EegRecording:
    def __init__(self, samples, sample_rate_hz, layout):
        samples = np.asarray(samples)
        if samples.ndim != 2:
            raise DataError(f"EEG samples must be [C, T], got {samples.shape}")
        if samples.shape[0] != layout.channel_count:
            raise DataError(
                f"{samples.shape[0]} channels vs layout with {layout.channel_count}"
            )
        if sample_rate_hz <= 0:
            raise DataError("sample rate must be positive")
        self.samples = samples
        self.sample_rate_hz = float(sample_rate_hz)
        self.layout = layout


class FmriRecording:
    def __init__(self, volumes, tr_seconds, voxel_size_mm=(2.0, 2.0, 2.0)):
        volumes = np.asarray(volumes)
        if volumes.ndim != 4:
            raise DataError(f"fMRI volumes must be [X, Y, Z, T], got {volumes.shape}")
        if tr_seconds <= 0:
            raise DataError("TR must be positive")
        self.volumes = volumes
        self.tr_seconds = float(tr_seconds)
        self.voxel_size_mm = tuple(float(v) for v in voxel_size_mm)


class StimulusSchedule:
    def __init__(self, events, duration_seconds):
        onsets = [e[0] for e in events]
        if any(b <= a for a, b in zip(onsets, onsets[1:])):
            raise DataError("onsets must be strictly increasing")
        self.events = [(float(t), str(k)) for t, k in events]
        self.duration_seconds = float(duration_seconds)

    def onsets(self, kind=None):
        return np.array(
            [t for t, k in self.events if kind is None or k == kind], dtype=float
        )


class EpochSet:
    """Stimulus-locked windows, [N_events, ..., 600] at 500 Hz."""

    def __init__(self, epochs, sample_rate_hz=EEG_RATE_HZ,
                 window_ms=EPOCH_WINDOW_MS, onsets=None):
        epochs = np.asarray(epochs)
        n_samples = round((window_ms[1] - window_ms[0]) * sample_rate_hz / 1000.0)
        if epochs.shape[-1] != n_samples:
            raise DataError(
                f"epoch length {epochs.shape[-1]} does not match the "
                f"{window_ms} ms window at {sample_rate_hz} Hz ({n_samples})"
            )
        self.epochs = epochs
        self.sample_rate_hz = float(sample_rate_hz)
        self.window_ms = tuple(window_ms)
        self.onsets = None if onsets is None else np.asarray(onsets, dtype=float)

    def mean(self):
        return self.epochs.mean(axis=0)


# ---------------------------------------------------------------------------
# layout transforms
# ---------------------------------------------------------------------------


def assign_channels_to_volume(eeg):
    """Scatter [C, T] channel data into the layout grid; unmapped voxels stay 0."""
    layout = eeg.layout
    nx, ny, nz = layout.grid
    T = eeg.samples.shape[1]
    vol = np.zeros((nx * ny * nz, T), dtype=eeg.samples.dtype)
    vol[layout.flat_indices()] = eeg.samples
    return vol.reshape(nx, ny, nz, T)


def extract_channels(volume, layout):
    """Inverse of assign: gather the mapped voxels back to [C, T]."""
    nx, ny, nz = layout.grid
    if volume.shape[:3] != (nx, ny, nz):
        raise DataError(f"volume grid {volume.shape[:3]} does not match layout")
    flat = volume.reshape(nx * ny * nz, *volume.shape[3:])
    return flat[layout.flat_indices()]


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def block_mean_time(signal, factor):
    """Mean over consecutive length-`factor` blocks of the last axis.

    A trailing remainder shorter than one block is dropped.
    """
    signal = np.asarray(signal)
    factor = int(factor)
    if factor < 1:
        raise DataError("factor must be >= 1")
    T = signal.shape[-1]
    nblocks = T // factor
    if nblocks == 0:
        raise DataError(f"time extent {T} shorter than one block of {factor}")
    if T % factor:
        log.debug("block_mean_time dropping %d trailing samples", T % factor)
        signal = signal[..., : nblocks * factor]
    shaped = signal.reshape(signal.shape[:-1] + (nblocks, factor))
    return shaped.mean(axis=-1)


def _pad_to_multiple(volume, factor):
    pads = []
    for extent in volume.shape[:3]:
        short = (-extent) % factor
        pads.append((0, short))
    pads += [(0, 0)] * (volume.ndim - 3)
    if any(p[1] for p in pads):
        volume = np.pad(volume, pads, mode="edge")
    return volume


def block_mean_space(volume, factor):
    """Mean over factor^3 spatial blocks, per time point.

    Extents not divisible by the factor are padded by edge replication first.
    """
    volume = np.asarray(volume)
    factor = int(factor)
    if factor < 1:
        raise DataError("factor must be >= 1")
    if volume.ndim < 3:
        raise DataError("expected a volume with three leading spatial axes")
    volume = _pad_to_multiple(volume, factor)
    nx, ny, nz = (volume.shape[i] // factor for i in range(3))
    rest = volume.shape[3:]
    shaped = volume.reshape((nx, factor, ny, factor, nz, factor) + rest)
    return shaped.mean(axis=(1, 3, 5))


def replicate_space(volume, factor):
    """Nearest-neighbour spatial upsampling, the right inverse of block_mean_space."""
    out = np.repeat(np.asarray(volume), factor, axis=0)
    out = np.repeat(out, factor, axis=1)
    return np.repeat(out, factor, axis=2)


def upsample_time(signal, factor):
    """Linear interpolation along the last axis: T -> factor*T.

    Original samples are preserved at stride positions; the final
    (factor - 1) samples hold the last value, having nothing to lean on.
    """
    signal = np.asarray(signal)
    factor = int(factor)
    if factor < 1:
        raise DataError("factor must be >= 1")
    if factor == 1:
        return signal.copy()
    T = signal.shape[-1]
    pos = np.arange(T * factor) / factor
    lo = np.minimum(pos.astype(np.intp), T - 1)
    hi = np.minimum(lo + 1, T - 1)
    frac = (pos - lo).astype(signal.dtype, copy=False)
    return (1 - frac) * signal[..., lo] + frac * signal[..., hi]


def linear_upsample_time(fmri, factor):
    """FmriRecording resampled to tr/factor via upsample_time."""
    vols = upsample_time(fmri.volumes, factor)
    return FmriRecording(vols, fmri.tr_seconds / factor, fmri.voxel_size_mm)


def block_center_times(n_blocks, factor, rate_hz=EEG_RATE_HZ, offset_samples=0):
    """Timestamps of block-mean samples: center of each source-sample block."""
    j = np.arange(n_blocks)
    return (offset_samples + j * factor + (factor - 1) / 2.0) / rate_hz


# ---------------------------------------------------------------------------
# epoching
# ---------------------------------------------------------------------------


def _window_samples(window_ms, rate_hz):
    before = round(-window_ms[0] * rate_hz / 1000.0)
    total = round((window_ms[1] - window_ms[0]) * rate_hz / 1000.0)
    return before, total


def epoch_extract(series, schedule, kind=None, sample_rate_hz=EEG_RATE_HZ,
                  window_ms=EPOCH_WINDOW_MS):
    """Cut stimulus-locked windows out of a [... , T] series at 500 Hz.

    Onsets snap to the nearest sample; windows that would cross a recording
    boundary are dropped (and logged). Raises if nothing survives.
    """
    series = np.asarray(series)
    before, total = _window_samples(window_ms, sample_rate_hz)
    T = series.shape[-1]
    kept, kept_onsets, dropped = [], [], 0
    for onset, k in schedule.events:
        if kind is not None and k != kind:
            continue
        center = round(onset * sample_rate_hz)
        start = center - before
        if start < 0 or start + total > T:
            dropped += 1
            continue
        kept.append(series[..., start:start + total])
        kept_onsets.append(onset)
    if dropped:
        log.debug("epoch_extract dropped %d boundary events", dropped)
    if not kept:
        raise DataError("empty epoch set after filtering")
    return EpochSet(np.stack(kept), sample_rate_hz, window_ms,
                    onsets=np.array(kept_onsets))


def jittered_epoch_mean(series, sample_times, schedule, kind=None,
                        out_rate_hz=EEG_RATE_HZ, window_ms=EPOCH_WINDOW_MS):
    """Average stimulus-locked epochs of a coarsely sampled series on a fine grid.

    ``series`` is [... , Tc] with one timestamp per coarse sample in
    ``sample_times``. For each event the coarse series is linearly
    interpolated at the fine epoch sample times; averaging across events
    whose onsets are jittered relative to the coarse grid recovers temporal
    structure far above the coarse rate.

    Returns the across-event mean epoch, shape [..., 600] at ``out_rate_hz``.
    """
    series = np.asarray(series)
    sample_times = np.asarray(sample_times, dtype=float)
    if sample_times.shape != (series.shape[-1],):
        raise DataError("need exactly one timestamp per coarse sample")
    before, total = _window_samples(window_ms, out_rate_hz)
    rel = (np.arange(total) - before) / out_rate_hz
    flat = series.reshape(-1, series.shape[-1])
    acc = np.zeros((flat.shape[0], total))
    n_kept = 0
    for onset, k in schedule.events:
        if kind is not None and k != kind:
            continue
        t = onset + rel
        if t[0] < sample_times[0] or t[-1] > sample_times[-1]:
            continue
        idx = np.searchsorted(sample_times, t, side="right") - 1
        idx = np.clip(idx, 0, len(sample_times) - 2)
        span = sample_times[idx + 1] - sample_times[idx]
        frac = (t - sample_times[idx]) / span
        acc += (1 - frac) * flat[:, idx] + frac * flat[:, idx + 1]
        n_kept += 1
    if n_kept == 0:
        raise DataError("no event window fits inside the sampled time range")
    mean = acc / n_kept
    return mean.reshape(series.shape[:-1] + (total,))


# ---------------------------------------------------------------------------
# persistence (tensor payload + text sidecar)
# ---------------------------------------------------------------------------


def save_eeg(path, eeg):
    path = Path(path)
    storage.save_tensor(path, eeg.samples)
    storage.save_mapping(path.with_suffix(".layout"), eeg.layout.mapping)
    storage.save_kv(path.with_suffix(".meta"), {
        "kind": "eeg",
        "sample_rate_hz": repr(eeg.sample_rate_hz),
        "grid": "{},{},{}".format(*eeg.layout.grid),
    })


def load_eeg(path):
    path = Path(path)
    samples = storage.load_tensor(path)
    meta = storage.load_kv(path.with_suffix(".meta"))
    if meta.get("kind") != "eeg":
        raise FormatError(f"{path}: sidecar does not describe an EEG recording")
    grid = tuple(int(v) for v in meta["grid"].split(","))
    mapping = storage.load_mapping(path.with_suffix(".layout"))
    return EegRecording(samples, float(meta["sample_rate_hz"]),
                        VolumeLayout(grid, mapping))


def save_fmri(path, fmri):
    path = Path(path)
    storage.save_tensor(path, fmri.volumes)
    storage.save_kv(path.with_suffix(".meta"), {
        "kind": "fmri",
        "tr_seconds": repr(fmri.tr_seconds),
        "voxel_size_mm": "{!r},{!r},{!r}".format(*fmri.voxel_size_mm),
    })


def load_fmri(path):
    path = Path(path)
    volumes = storage.load_tensor(path)
    meta = storage.load_kv(path.with_suffix(".meta"))
    if meta.get("kind") != "fmri":
        raise FormatError(f"{path}: sidecar does not describe an fMRI recording")
    voxel = tuple(float(v) for v in meta["voxel_size_mm"].split(","))
    return FmriRecording(volumes, float(meta["tr_seconds"]), voxel)


def save_epochs(path, epochset):
    path = Path(path)
    storage.save_tensor(path, epochset.epochs)
    meta = {
        "kind": "epochs",
        "sample_rate_hz": repr(epochset.sample_rate_hz),
        "window_ms": "{!r},{!r}".format(*epochset.window_ms),
    }
    if epochset.onsets is not None:
        meta["onsets"] = ";".join(repr(float(t)) for t in epochset.onsets)
    storage.save_kv(path.with_suffix(".meta"), meta)


def load_epochs(path):
    path = Path(path)
    epochs = storage.load_tensor(path)
    meta = storage.load_kv(path.with_suffix(".meta"))
    if meta.get("kind") != "epochs":
        raise FormatError(f"{path}: sidecar does not describe an epoch set")
    window = tuple(float(v) for v in meta["window_ms"].split(","))
    onsets = None
    if "onsets" in meta and meta["onsets"]:
        onsets = np.array([float(v) for v in meta["onsets"].split(";")])
    return EpochSet(epochs, float(meta["sample_rate_hz"]), window, onsets=onsets)


def save_schedule(path, schedule):
    storage.save_schedule(path, schedule.events, schedule.duration_seconds)


def load_schedule(path):
    events, duration = storage.load_schedule(path)
    return StimulusSchedule(events, duration)


# ---------------------------------------------------------------------------
# session preprocessing
# ---------------------------------------------------------------------------


def standardize(x):
    """Remove one mean and one scale from the whole array.

    A single affine per modality keeps the two reconstruction losses on
    comparable footing without reweighting voxels or channels relative to
    each other.
    """
    x = np.asarray(x, dtype=float)
    mean = float(x.mean())
    sd = float(x.std())
    if sd == 0.0:
        raise DataError("cannot standardize a constant signal")
    return (x - mean) / sd, mean, sd


def window_starts(n_samples, window=300, step=150):
    """Start indices of half-overlapping training windows."""
    if window <= 0 or step <= 0:
        raise DataError("window and step must be positive")
    starts = list(range(0, n_samples - window + 1, step))
    if not starts:
        raise DataError(
            f"session too short: {n_samples} samples < one {window}-sample window")
    return starts


def preprocess_session(eeg, fmri, spatial_factor, time_factor=175,
                       tr_upsample=6, zscore=True):
    """Bring one session to the shared training resolution.

    EEG: volumize the channels, then block-average time by `time_factor`
    (500 Hz -> 500/175 Hz). fMRI: block-average space down to the source
    grid, then linearly upsample time by `tr_upsample` so one TR spans
    exactly `tr_upsample` samples of the common timeline. Both streams are
    trimmed to the same extent and, by default, standardized first.
    """
    samples = eeg.samples
    volumes = fmri.volumes
    stats = {}
    if zscore:
        samples, stats["eeg_mean"], stats["eeg_sd"] = standardize(samples)
        volumes, stats["fmri_mean"], stats["fmri_sd"] = standardize(volumes)
    eeg_vol = assign_channels_to_volume(
        EegRecording(samples, eeg.sample_rate_hz, eeg.layout))
    eeg_tr = block_mean_time(eeg_vol, time_factor)
    coarse = block_mean_space(volumes, spatial_factor)
    fmri_tr = upsample_time(coarse, tr_upsample)
    extent = min(eeg_tr.shape[-1], fmri_tr.shape[-1])
    eeg_tr = eeg_tr[..., :extent]
    fmri_tr = fmri_tr[..., :extent]
    return {
        "eeg_std": samples.astype(np.float32),
        "fmri_std": volumes.astype(np.float32),
        "eeg_tr": eeg_tr.astype(np.float32),
        "fmri_tr": fmri_tr.astype(np.float32),
        "stats": stats,
        "rate_hz": eeg.sample_rate_hz / time_factor,
    }
