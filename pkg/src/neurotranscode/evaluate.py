"""Evaluation probes: impulse-response extraction, correlation statistics
with Bonferroni control, and ground-truth recovery metrics.
"""

from __future__ import annotations

import numpy as np
from scipy.special import stdtr

from .tensor import TensorError
from .transcoder import TEMPORAL_FACTOR, fmri_decode, fmri_encode


class HrfEstimate:
    """R2's impulse response at the source rate, with extracted features.

    The lag axis carries the window-center correction: an fMRI frame is the
    mean over its TR window, so lag 0 of the raw kernel sits (TR - dt)/2
    ahead of the impulse in signal time.
    """

    def __init__(self, curve, lags, dt_seconds, tr_seconds, warning=None):
        self.curve = np.asarray(curve, dtype=float)
        self.lags = np.asarray(lags)
        self.dt_seconds = float(dt_seconds)
        self.tr_seconds = float(tr_seconds)
        self.warning = warning
        offset = (tr_seconds - dt_seconds) / 2.0
        self.lag_times = self.lags * dt_seconds + offset
        i_peak = int(np.argmax(self.curve))
        self.peak_time_s = float(self.lag_times[i_peak])
        self.peak_value = float(self.curve[i_peak])
        after = self.curve[i_peak:]
        i_under = i_peak + int(np.argmin(after))
        self.undershoot_time_s = float(self.lag_times[i_under])
        self.undershoot_value = float(self.curve[i_under])

    @property
    def features(self):
        return (self.peak_time_s, self.peak_value,
                self.undershoot_time_s, self.undershoot_value)


def r2_horizon_seconds(params, tr_seconds=2.1):
    """Receptive-field span of R2 in seconds of input signal."""
    dt = tr_seconds / TEMPORAL_FACTOR
    span = 1
    step = 1
    for layer in params.r2:
        span += (layer.ksize - 1) * step
        step *= layer.stride
    return span * dt


def hrf_probe(params, cover_seconds=32.0, tr_seconds=2.1):
    """Feed unit impulses to R2 and interleave the responses.

    R2 maps the source rate down to the TR rate, so a single impulse only
    samples its kernel every TEMPORAL_FACTOR-th lag; sweeping the impulse
    over all input phases and interleaving recovers the response at the
    source rate. Covers at least ``cover_seconds`` on the causal side.
    """
    f = TEMPORAL_FACTOR
    dt = tr_seconds / f
    n_lag = int(np.ceil(cover_seconds / dt))
    n_frames = 2 * (n_lag // f + 4)
    T = n_frames * f
    j0 = (n_frames // 2) * f
    # biases give a nonzero response to silence; the kernel estimate is the
    # deviation of each impulse response from that baseline
    baseline = fmri_encode(params, np.zeros((1, 1, 1, T), dtype=np.float32))
    baseline = baseline.data[0, 0, 0]
    responses = {}
    for phase in range(f):
        x = np.zeros((1, 1, 1, T), dtype=np.float32)
        x[0, 0, 0, j0 + phase] = 1.0
        out = fmri_encode(params, x).data[0, 0, 0] - baseline
        for m in range(n_frames):
            responses[m * f - (j0 + phase)] = float(out[m])
    lags = np.arange(-n_lag, n_lag + 1)
    curve = np.array([responses.get(int(l), 0.0) for l in lags])
    warning = None
    horizon = r2_horizon_seconds(params, tr_seconds)
    if horizon < 20.0:
        warning = (f"R2 receptive field spans only {horizon:.1f} s; "
                   "a full hemodynamic response does not fit")
    return HrfEstimate(curve, lags, dt, tr_seconds, warning=warning)


# ---------------------------------------------------------------------------
# correlation statistics
# ---------------------------------------------------------------------------


def pearson_r(a, b):
    """Product-moment correlation with a t-distribution p-value (n-2 dof)."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise TensorError(f"length mismatch: {a.shape} vs {b.shape}")
    n = a.size
    if n < 3:
        raise TensorError("need at least 3 samples")
    da = a - a.mean()
    db = b - b.mean()
    va = np.dot(da, da)
    vb = np.dot(db, db)
    if va == 0 or vb == 0:
        raise TensorError("degenerate series: zero variance")
    r = float(np.dot(da, db) / np.sqrt(va * vb))
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * np.sqrt((n - 2) / (1.0 - r * r))
    p = 2.0 * stdtr(n - 2, -abs(t))
    return r, float(p)


def pearson_r_map(estimated, truth):
    """Row-wise r over the last axis; zero-variance rows score 0."""
    est = np.asarray(estimated, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if est.shape != tru.shape:
        raise TensorError(f"grid mismatch: {est.shape} vs {tru.shape}")
    e = est.reshape(-1, est.shape[-1])
    t = tru.reshape(-1, tru.shape[-1])
    e = e - e.mean(axis=1, keepdims=True)
    t = t - t.mean(axis=1, keepdims=True)
    ve = (e * e).sum(axis=1)
    vt = (t * t).sum(axis=1)
    num = (e * t).sum(axis=1)
    denom = np.sqrt(ve * vt)
    r = np.divide(num, denom, out=np.zeros_like(num), where=denom > 0)
    return r.reshape(est.shape[:-1])


class CorrelationReport:
    def __init__(self, r_values, p_values, alpha=0.05):
        self.r_values = np.asarray(r_values, dtype=float)
        self.p_values = np.asarray(p_values, dtype=float)
        self.alpha = float(alpha)
        self.n_tests = len(self.p_values)
        self.threshold = self.alpha / self.n_tests
        self.significant = self.p_values < self.threshold
        self.significant_count = int(self.significant.sum())


def bonferroni_report(tests, alpha=0.05):
    """tests: iterable of (r, p) pairs, one per run."""
    tests = list(tests)
    if not tests:
        raise TensorError("no tests to report")
    r = [t[0] for t in tests]
    p = [t[1] for t in tests]
    return CorrelationReport(r, p, alpha)


def null_family_error_rate(n_families=1000, n_tests=87, n_samples=20,
                           alpha=0.05, seed=0):
    """Monte Carlo FWER of the Bonferroni report on independent noise."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xfe]))
    hits = 0
    for _ in range(n_families):
        a = rng.standard_normal((n_tests, n_samples))
        b = rng.standard_normal((n_tests, n_samples))
        tests = [pearson_r(a[i], b[i]) for i in range(n_tests)]
        if bonferroni_report(tests, alpha).significant_count > 0:
            hits += 1
    return hits / n_families


# ---------------------------------------------------------------------------
# ground-truth recovery
# ---------------------------------------------------------------------------


def source_recovery_metrics(estimated, truth, active_mask):
    """Voxelwise recovery summary against simulator ground truth.

    hit_rate: fraction of truly active voxels whose correlation exceeds the
    95th percentile of the inactive voxels' correlations.
    """
    r_map = pearson_r_map(estimated, truth)
    active = np.asarray(active_mask, dtype=bool)
    if active.shape != r_map.shape:
        raise TensorError("active mask shape does not match the grid")
    inactive_r = r_map[~active]
    active_r = r_map[active]
    if inactive_r.size == 0 or active_r.size == 0:
        raise TensorError("need both active and inactive voxels")
    cutoff = float(np.percentile(inactive_r, 95))
    return {
        "r_map": r_map,
        "median_r": float(np.median(r_map)),
        "median_active_r": float(np.median(active_r)),
        "hit_rate": float((active_r > cutoff).mean()),
        "cutoff": cutoff,
    }


def fmri_source_inspect(params, fmri, schedule, voxels=None,
                        tr_seconds=2.1, post_window_s=1.0):
    """Deconvolved per-voxel series plus an event-alignment score.

    The score is the mean of the deconvolved series inside post-onset
    windows minus its mean elsewhere, in units of the series sd.
    """
    fmri = np.asarray(fmri)
    est = fmri_decode(params, fmri).data
    grid = est.shape[:3]
    T = est.shape[-1]
    dt = tr_seconds / TEMPORAL_FACTOR
    in_window = np.zeros(T, dtype=bool)
    times = (np.arange(T) + 0.5) * dt
    for onset, _ in schedule.events:
        in_window |= (times >= onset) & (times < onset + post_window_s)
    if voxels is None:
        series = est.reshape(-1, T)
    else:
        series = np.empty((len(voxels), T), dtype=est.dtype)
        for i, (x, y, z) in enumerate(voxels):
            if not (0 <= x < grid[0] and 0 <= y < grid[1] and 0 <= z < grid[2]):
                raise TensorError(f"voxel {(x, y, z)} outside grid {grid}")
            series[i] = est[x, y, z]
    sd = series.std(axis=1)
    safe = np.where(sd > 0, sd, 1.0)
    if in_window.any() and (~in_window).any():
        score = (series[:, in_window].mean(axis=1)
                 - series[:, ~in_window].mean(axis=1)) / safe
    else:
        score = np.zeros(series.shape[0])
    score = np.where(sd > 0, score, 0.0)
    return series, score


# ---------------------------------------------------------------------------
# CSV emitters
# ---------------------------------------------------------------------------


def write_history_csv(path, history):
    from . import storage
    keys = sorted({k for row in history for k in row})
    rows = [[row.get(k, "") for k in keys] for row in history]
    storage.save_csv(path, keys, rows)


def write_hrf_csv(path, estimate):
    from . import storage
    rows = [(f"{float(t)!r}", f"{float(v)!r}")
            for t, v in zip(estimate.lag_times, estimate.curve)]
    storage.save_csv(path, ["lag_seconds", "response"], rows)


def write_correlation_csv(path, report, labels=None):
    from . import storage
    labels = labels or [str(i) for i in range(report.n_tests)]
    rows = [
        (labels[i], f"{float(report.r_values[i])!r}",
         f"{float(report.p_values[i])!r}", int(report.significant[i]))
        for i in range(report.n_tests)
    ]
    storage.save_csv(path, ["run", "r", "p", "significant"], rows)


def write_rmap_csv(path, r_map):
    from . import storage
    r_map = np.asarray(r_map)
    rows = []
    for x in range(r_map.shape[0]):
        for y in range(r_map.shape[1]):
            for z in range(r_map.shape[2]):
                rows.append((x, y, z, f"{float(r_map[x, y, z])!r}"))
    storage.save_csv(path, ["x", "y", "z", "r"], rows)
