"""Transformational backprojection: fuse the two source estimates.

The integrated source lives on the native fMRI grid at the EEG epoch rate.
Its two input channels are the EEG-estimated source (spatially upsampled)
and the fMRI-estimated source (temporally upsampled by jittered epoching).
A spatial-only CNN maps the pair to one volume per epoch time point, and
training asks the projections of that output to match what each modality
actually measured, before its upsampling step: the temporal block-mean
against the fMRI-resolution epochs, the spatial block-mean against the
EEG-resolution epochs, each through a learned scale and bias.

Time never mixes: the epoch axis is a pure batch axis, which is what lets
one parameter set serve every time point of a session.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from . import storage, tensor
from .conv import trilinear_resize
from .datamodel import block_center_times, EPOCH_WINDOW_MS
from .optim import OptimizerState, adam_update, zero_grads
from .tensor import Tensor, TensorError, as_tensor, backward, mse
from .transcoder import Layer, eeg_decode, fmri_decode

log = logging.getLogger(__name__)

TEMPORAL_BLOCK = 175


class BackprojectorParams:
    """Spatial fusion stack plus the projection scale/bias corrections."""

    def __init__(self, layers, omega0, omega1, b0, b1, hyper):
        for layer in layers:
            if layer.kind != "spatial":
                raise TensorError("the backprojector admits only spatial layers")
        self.layers = layers
        self.omega0 = omega0
        self.omega1 = omega1
        self.b0 = b0
        self.b1 = b1
        self.hyper = dict(hyper)

    @property
    def spatial_factor(self):
        return int(self.hyper["spatial_factor"])

    @property
    def temporal_block(self):
        return int(self.hyper.get("temporal_block", TEMPORAL_BLOCK))

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend(layer.parameters())
        out += [self.omega0, self.omega1, self.b0, self.b1]
        return out

    def copy_state(self):
        return [p.data.copy() for p in self.parameters()]

    def load_state(self, state):
        for p, d in zip(self.parameters(), state):
            p.data = d.copy()


def init_bp_params(spatial_factor, temporal_block=TEMPORAL_BLOCK, ksize=3,
                   width=4, depth=3, linear=False, seed=0, init_noise=1e-2,
                   dtype=np.float32):
    """Near-identity fusion stack; scales start at 1, biases at 0."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xb9]))
    act = not linear
    layers = []
    chans = [2] + [width] * (depth - 1) + [1]
    for i in range(depth):
        layers.append(Layer(
            "spatial", chans[i], chans[i + 1], ksize,
            activation=act and i < depth - 1,
            rng=rng, init_noise=init_noise, dtype=dtype,
        ))
    scalar = lambda v: Tensor(np.array(v, dtype=dtype), requires_grad=True)
    hyper = {
        "spatial_factor": int(spatial_factor),
        "temporal_block": int(temporal_block),
        "ksize": ksize, "width": width, "depth": depth,
        "linear": bool(linear), "seed": int(seed),
    }
    return BackprojectorParams(layers, scalar(1.0), scalar(1.0),
                               scalar(0.0), scalar(0.0), hyper)


def project_temporal(integrated, block_len=TEMPORAL_BLOCK):
    """theta0: mean over each complete block of `block_len` time points."""
    x = as_tensor(integrated)
    T = x.shape[3]
    n = T // block_len
    if n < 1:
        raise TensorError(
            f"time extent {T} holds no complete {block_len}-sample block"
        )
    if T % block_len:
        x = tensor.slice_axis(x, 3, 0, n * block_len)
    return tensor.axis_block_mean(x, 3, block_len)


def project_spatial(integrated, factor):
    """theta1: mean over each factor^3 spatial block, per time point."""
    x = as_tensor(integrated)
    for axis in range(3):
        if x.shape[axis] % factor:
            raise TensorError(
                f"spatial extent {x.shape[axis]} not divisible by {factor}"
            )
    for axis in range(3):
        x = tensor.axis_block_mean(x, axis, factor)
    return x


def backproject(params, channels):
    """Fuse [X,Y,Z,T,2] channel volumes into the integrated source [X,Y,Z,T]."""
    x = as_tensor(channels)
    if x.ndim != 5 or x.shape[-1] != 2:
        raise TensorError(f"expected [X,Y,Z,T,2] input, got {x.shape}")
    h = x
    for layer in params.layers:
        h = layer.forward(h)
    if h.shape[-1] != 1:
        raise TensorError("fusion stack must end in a single channel")
    return tensor.reshape(h, h.shape[:-1])


def bp_loss(params, channels, eeg_ref, fmri_ref):
    """Projection-consistency loss against the pre-upsampling references.

    ``eeg_ref`` is the epoched EEG-estimated source at its coarse spatial
    grid; ``fmri_ref`` the epoched fMRI-estimated source at its block
    temporal resolution. Returns (term_fmri, term_eeg, total).
    """
    s = backproject(params, channels)
    proj_t = project_temporal(s, params.temporal_block)
    proj_s = project_spatial(s, params.spatial_factor)
    pred_f = tensor.add(tensor.mul(params.omega0, proj_t), params.b0)
    pred_e = tensor.add(tensor.mul(params.omega1, proj_s), params.b1)
    term_f = mse(pred_f, as_tensor(fmri_ref))
    term_e = mse(pred_e, as_tensor(eeg_ref))
    return term_f, term_e, tensor.add(term_f, term_e)


def train_backprojector(params, channels, eeg_ref, fmri_ref, epochs=50,
                        lr=1e-2, seed=0):
    """Full-batch Adam on one session's epoched estimates.

    All epoch time points enter every step (the batch axis is time), so the
    run is deterministic given the warm-start parameters. Returns
    (params, history); aborts restoring the last finite step on divergence.
    """
    param_list = params.parameters()
    state = OptimizerState(param_list, learning_rate=lr)
    history = []
    last_good = params.copy_state()
    for epoch in range(int(epochs)):
        zero_grads(param_list)
        try:
            term_f, term_e, total = bp_loss(params, channels, eeg_ref, fmri_ref)
            finite = np.isfinite(total.item())
        except TensorError as err:
            if "non-finite" not in str(err):
                raise
            finite = False
        if not finite:
            params.load_state(last_good)
            log.warning("backprojector diverged at epoch %d; restored", epoch)
            history.append({"epoch": epoch, "diverged": True})
            break
        backward(total, params=param_list)
        adam_update(state)
        history.append({"epoch": epoch, "term_fmri": term_f.item(),
                        "term_eeg": term_e.item(), "total": total.item()})
        last_good = params.copy_state()
    return params, history


# ---------------------------------------------------------------------------
# building the epoched estimate pair from a trained transcoder
# ---------------------------------------------------------------------------


def epoch_block_refs(series, sample_times, schedule, kind=None,
                     block_s=0.35, n_blocks=3,
                     window_start_s=EPOCH_WINDOW_MS[0] / 1000.0):
    """Event-locked averages of a coarse series at epoch block centers.

    Block b of the epoch covers [start + b*block_s, start + (b+1)*block_s);
    its reference value is the series linearly interpolated at the block
    center, averaged over events. Returns [..., n_blocks].
    """
    series = np.asarray(series)
    sample_times = np.asarray(sample_times, dtype=float)
    flat = series.reshape(-1, series.shape[-1])
    centers = window_start_s + (np.arange(n_blocks) + 0.5) * block_s
    acc = np.zeros((flat.shape[0], n_blocks))
    kept = 0
    for onset, k in schedule.events:
        if kind is not None and k != kind:
            continue
        t = onset + centers
        if t[0] < sample_times[0] or t[-1] > sample_times[-1]:
            continue
        idx = np.clip(np.searchsorted(sample_times, t, side="right") - 1,
                      0, len(sample_times) - 2)
        frac = (t - sample_times[idx]) / (sample_times[idx + 1] - sample_times[idx])
        acc += (1 - frac) * flat[:, idx] + frac * flat[:, idx + 1]
        kept += 1
    if kept == 0:
        raise TensorError("no event window fits inside the series")
    return (acc / kept).reshape(series.shape[:-1] + (n_blocks,))


def _decode_epoch_mean(tr_params, epochs, chunk=4800):
    """Mean over events of the EEG decoder applied to each epoch.

    The decoder never mixes time, so all epochs can share one long time
    axis; chunking bounds the working set without changing any value.
    """
    n_ev, n_ch, n_t = epochs.shape
    grid = tr_params.eeg_grid
    series = np.moveaxis(epochs, 1, 0).reshape(n_ch, n_ev * n_t)
    vol = np.zeros((int(np.prod(grid)), n_ev * n_t), dtype=np.float32)
    vol[tr_params.eeg_flat_indices()] = series
    vol = vol.reshape(tuple(grid) + (n_ev * n_t,))
    outs = []
    for start in range(0, vol.shape[-1], chunk):
        outs.append(eeg_decode(tr_params, vol[..., start:start + chunk]).data)
    est = np.concatenate(outs, axis=-1)
    return est.reshape(est.shape[:3] + (n_ev, n_t)).mean(axis=3)


def prepare_session(tr_params, eeg_std, fmri_std, schedule, spatial_factor,
                    kind=None, rate_hz=500.0, tr_seconds=2.1):
    """Epoched estimate pair for one session.

    ``eeg_std`` is the standardized [channels, T] EEG at the raw rate,
    ``fmri_std`` the standardized native-grid fMRI volumes at TR. Decoding
    runs per event window for the EEG (exact, since the decoder never
    mixes time) and over the whole session for the fMRI, whose estimate is
    then epoched at the fine rate via its jitter across events. The fMRI
    decoder runs directly on the native grid; its kernels never mix space.

    Returns (channels [X,Y,Z,600,2], eeg_ref, fmri_ref).
    """
    from .datamodel import epoch_extract, jittered_epoch_mean

    epochs = epoch_extract(np.asarray(eeg_std), schedule, kind=kind,
                           sample_rate_hz=rate_hz)
    eeg_ref = _decode_epoch_mean(tr_params, epochs.epochs)

    eeg_chan = trilinear_resize(
        as_tensor(eeg_ref[..., None]),
        tuple(g * spatial_factor for g in eeg_ref.shape[:3]),
    ).data[..., 0]

    fmri_src = fmri_decode(tr_params, np.asarray(fmri_std, dtype=np.float32)).data
    block = round(tr_seconds * rate_hz) // 6
    times = block_center_times(fmri_src.shape[-1], block, rate_hz)
    fmri_chan = jittered_epoch_mean(fmri_src, times, schedule, kind=kind,
                                    out_rate_hz=rate_hz)
    n_blocks = fmri_chan.shape[-1] // block
    fmri_ref = epoch_block_refs(fmri_src, times, schedule, kind=kind,
                                block_s=block / rate_hz, n_blocks=n_blocks)

    if eeg_chan.shape != fmri_chan.shape:
        raise TensorError(
            f"estimate grids disagree: {eeg_chan.shape} vs {fmri_chan.shape}"
        )
    channels = np.stack([eeg_chan, fmri_chan], axis=-1).astype(np.float32)
    return channels, eeg_ref.astype(np.float32), fmri_ref.astype(np.float32)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_bp_checkpoint(prefix, params, extra=None):
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    manifest = {f"hyper.{k}": v for k, v in params.hyper.items()}
    manifest["stack.bp"] = str(len(params.layers))
    for i, layer in enumerate(params.layers):
        manifest[f"layer.bp.{i}"] = layer.spec()
        storage.save_tensor(f"{prefix}.bp.{i}.taps.tnsr", layer.kernel.taps.data)
        storage.save_tensor(f"{prefix}.bp.{i}.bias.tnsr", layer.kernel.bias.data)
    for name in ("omega0", "omega1", "b0", "b1"):
        storage.save_tensor(f"{prefix}.{name}.tnsr", getattr(params, name).data)
    if extra:
        manifest.update(extra)
    storage.save_kv(f"{prefix}.manifest", manifest)
    return f"{prefix}.manifest"


def load_bp_checkpoint(prefix):
    prefix = Path(str(prefix).removesuffix(".manifest"))
    manifest = storage.load_kv(f"{prefix}.manifest")
    hyper = {}
    for key, value in manifest.items():
        if key.startswith("hyper."):
            name = key[len("hyper."):]
            if name == "linear":
                hyper[name] = value == "True"
            else:
                hyper[name] = int(value)
    layers = []
    for i in range(int(manifest["stack.bp"])):
        layer = Layer.from_spec(manifest[f"layer.bp.{i}"])
        layer.kernel.taps.data = storage.load_tensor(f"{prefix}.bp.{i}.taps.tnsr")
        layer.kernel.bias.data = storage.load_tensor(f"{prefix}.bp.{i}.bias.tnsr")
        layers.append(layer)
    scalars = []
    for name in ("omega0", "omega1", "b0", "b1"):
        data = storage.load_tensor(f"{prefix}.{name}.tnsr").reshape(())
        scalars.append(Tensor(data, requires_grad=True))
    return BackprojectorParams(layers, *scalars, hyper)
