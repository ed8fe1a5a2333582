"""The cyclic transcoder: G1/G2 decode into the latent source space, R1/R2
encode back out, and four consistency losses tie the cycle together.

Module split is structural: G1 and R1 hold only spatial kernels, G2 and R2
only temporal ones. Because of that, trained weights transfer across
resolutions: G1 runs unchanged on 2.86 Hz training windows or 500 Hz epochs,
and G2/R2 run unchanged on any spatial grid.

Training batches carry the EEG at training resolution and the fMRI
temporally upsampled to the same 300-sample timeline; the loss recovers the
native-TR frames by reading every sixth sample, which reproduces the
originals exactly since linear upsampling preserves them at stride
positions.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from . import storage, tensor
from .conv import ConvKernel, conv, impulse_taps, transpose_conv, trilinear_resize
from .tensor import Tensor, TensorError, as_tensor, backward, leaky_relu, mse

log = logging.getLogger(__name__)

TEMPORAL_FACTOR = 6
LEAKY_ALPHA = 0.1


class Layer:
    """One convolutional layer: kernel, optional bias, optional activation."""

    def __init__(self, kind, ch_in, ch_out, ksize, stride=1, transposed=False,
                 activation=False, rng=None, init_noise=1e-2, dtype=np.float32):
        self.kind = kind
        self.ch_in = int(ch_in)
        self.ch_out = int(ch_out)
        self.ksize = int(ksize)
        self.stride = int(stride)
        self.transposed = bool(transposed)
        self.activation = bool(activation)
        nk = 1 if kind == "temporal" else 3
        kdims = (self.ksize,) * nk
        # a transposed layer maps ch_in -> ch_out through the adjoint, so its
        # kernel is declared the other way around
        cin, cout = (ch_out, ch_in) if transposed else (ch_in, ch_out)
        taps = impulse_taps(kdims, cin, cout, dtype=dtype)
        if rng is not None and init_noise > 0:
            taps = taps + rng.uniform(-init_noise, init_noise, taps.shape)
        self.kernel = ConvKernel(
            Tensor(taps.astype(dtype), requires_grad=True),
            cin, cout, kind,
            bias=Tensor(np.zeros(ch_out, dtype=dtype), requires_grad=True),
        )

    def forward(self, x):
        if self.transposed:
            out = transpose_conv(x, self.kernel, stride=self.stride)
        else:
            out = conv(x, self.kernel, stride=self.stride)
        if self.activation:
            out = leaky_relu(out, LEAKY_ALPHA)
        return out

    def parameters(self):
        return self.kernel.parameters()

    def spec(self):
        return "{} {} {} {} {} {} {}".format(
            self.kind, self.ch_in, self.ch_out, self.ksize, self.stride,
            int(self.transposed), int(self.activation),
        )

    @classmethod
    def from_spec(cls, text):
        kind, ci, co, k, s, tr, act = text.split()
        layer = cls.__new__(cls)
        layer.kind = kind
        layer.ch_in, layer.ch_out = int(ci), int(co)
        layer.ksize, layer.stride = int(k), int(s)
        layer.transposed = bool(int(tr))
        layer.activation = bool(int(act))
        nk = 1 if kind == "temporal" else 3
        cin, cout = (layer.ch_out, layer.ch_in) if layer.transposed else \
            (layer.ch_in, layer.ch_out)
        layer.kernel = ConvKernel(
            Tensor(np.zeros((layer.ksize,) * nk + (cin, cout), dtype=np.float32),
                   requires_grad=True),
            cin, cout, kind,
            bias=Tensor(np.zeros(layer.ch_out, dtype=np.float32),
                        requires_grad=True),
        )
        return layer


class TranscoderParams:
    """The four module parameter lists plus the geometry they map between."""

    def __init__(self, g1, g2, r1, r2, hyper, layout_mapping):
        self.g1 = g1
        self.g2 = g2
        self.r1 = r1
        self.r2 = r2
        self.hyper = dict(hyper)
        self.layout_mapping = dict(layout_mapping)
        for layer in g1 + r1:
            if layer.kind != "spatial":
                raise TensorError("G1/R1 admit only spatial layers")
        for layer in g2 + r2:
            if layer.kind != "temporal":
                raise TensorError("G2/R2 admit only temporal layers")

    @property
    def eeg_grid(self):
        return tuple(self.hyper["eeg_grid"])

    @property
    def source_grid(self):
        return tuple(self.hyper["source_grid"])

    def eeg_flat_indices(self):
        _, ny, nz = self.eeg_grid
        idx = np.array(
            [(x * ny + y) * nz + z
             for _, (x, y, z) in sorted(self.layout_mapping.items())],
            dtype=np.intp,
        )
        return idx

    def parameters(self):
        out = []
        for stack in (self.g1, self.g2, self.r1, self.r2):
            for layer in stack:
                out.extend(layer.parameters())
        return out

    def copy_state(self):
        return [p.data.copy() for p in self.parameters()]

    def load_state(self, state):
        for p, d in zip(self.parameters(), state):
            p.data = d.copy()


def init_params(layout_mapping, eeg_grid=(11, 9, 5), source_grid=(8, 9, 8),
                spatial_k=3, temporal_k=9, spatial_width=8, temporal_width=8,
                linear=False, seed=0, init_noise=1e-2, dtype=np.float32):
    """Near-identity initialization of all four modules."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x7c0de]))
    act = not linear
    sw, tw = spatial_width, temporal_width
    mk = lambda *a, **k: Layer(*a, rng=rng, init_noise=init_noise, dtype=dtype, **k)
    g1 = [
        mk("spatial", 1, sw, spatial_k, transposed=True, activation=act),
        mk("spatial", sw, 1, spatial_k, transposed=True),
    ]
    r1 = [
        mk("spatial", 1, sw, spatial_k, activation=act),
        mk("spatial", sw, 1, spatial_k),
    ]
    g2 = [
        mk("temporal", 1, tw, temporal_k, transposed=True, activation=act),
        mk("temporal", tw, tw, temporal_k, transposed=True, activation=act),
        mk("temporal", tw, 1, temporal_k, stride=TEMPORAL_FACTOR, transposed=True),
    ]
    r2 = [
        mk("temporal", 1, tw, temporal_k, stride=TEMPORAL_FACTOR, activation=act),
        mk("temporal", tw, tw, temporal_k, activation=act),
        mk("temporal", tw, 1, temporal_k),
    ]
    hyper = {
        "eeg_grid": tuple(eeg_grid),
        "source_grid": tuple(source_grid),
        "spatial_k": spatial_k,
        "temporal_k": temporal_k,
        "spatial_width": sw,
        "temporal_width": tw,
        "linear": bool(linear),
        "seed": int(seed),
        "init_noise": init_noise,
    }
    return TranscoderParams(g1, g2, r1, r2, hyper, layout_mapping)


def _run_stack(layers, x):
    for layer in layers:
        x = layer.forward(x)
    return x


def _with_channel(x):
    x = as_tensor(x)
    return tensor.reshape(x, x.shape + (1,))


def _drop_channel(x):
    if x.shape[-1] != 1:
        raise TensorError(f"expected a single channel, got {x.shape}")
    return tensor.reshape(x, x.shape[:-1])


def eeg_decode(params, eeg_volume):
    """G1: EEG grid volume [11,9,5,T] -> source grid volume, same T."""
    x = as_tensor(eeg_volume)
    if x.shape[:3] != params.eeg_grid:
        raise TensorError(f"expected EEG grid {params.eeg_grid}, got {x.shape[:3]}")
    h = _run_stack(params.g1, _with_channel(x))
    h = trilinear_resize(h, params.source_grid)
    return _drop_channel(h)


def eeg_encode(params, source):
    """R1: source grid volume -> EEG grid volume, same T."""
    x = as_tensor(source)
    if x.shape[:3] != params.source_grid:
        raise TensorError(
            f"expected source grid {params.source_grid}, got {x.shape[:3]}"
        )
    h = trilinear_resize(_with_channel(x), params.eeg_grid)
    h = _run_stack(params.r1, h)
    return _drop_channel(h)


def fmri_decode(params, fmri):
    """G2: any-grid fMRI [...,T] -> source rate [...,6T]."""
    x = as_tensor(fmri)
    h = _run_stack(params.g2, _with_channel(x))
    return _drop_channel(h)


def fmri_encode(params, source):
    """R2: source rate [...,6T] -> fMRI rate [...,T]."""
    x = as_tensor(source)
    if x.shape[3] % TEMPORAL_FACTOR:
        raise TensorError(
            f"time extent {x.shape[3]} not divisible by {TEMPORAL_FACTOR}"
        )
    h = _run_stack(params.r2, _with_channel(x))
    return _drop_channel(h)


class TrainBatch:
    """One simultaneous 300-sample window of both modalities at 2.857 Hz."""

    def __init__(self, eeg, fmri):
        eeg = np.asarray(eeg)
        fmri = np.asarray(fmri)
        if eeg.shape[-1] != fmri.shape[-1]:
            raise TensorError(
                f"window time extents differ: {eeg.shape[-1]} vs {fmri.shape[-1]}"
            )
        self.eeg = eeg
        self.fmri = fmri


def cyclic_loss(batch, params):
    """The four path losses and their unweighted sum.

    EEG-side comparisons run over the mapped channel voxels only; the other
    432 grid positions are structural zeros with no signal to reconstruct.
    The fMRI enters G2 and the loss targets at native TR, read back off the
    upsampled window at stride positions.
    """
    f_native = np.ascontiguousarray(batch.fmri[..., ::TEMPORAL_FACTOR])
    mask = params.eeg_flat_indices()
    e_vol = as_tensor(batch.eeg)
    e_chan = tensor.take_flat_spatial(e_vol, mask)
    f_nat = as_tensor(f_native)

    g1e = eeg_decode(params, e_vol)
    g2f = fmri_decode(params, f_nat)

    loss1 = mse(e_chan, tensor.take_flat_spatial(eeg_encode(params, g1e), mask))
    loss2 = mse(f_nat, fmri_encode(params, g2f))
    loss3 = mse(e_chan, tensor.take_flat_spatial(eeg_encode(params, g2f), mask))
    loss4 = mse(f_nat, fmri_encode(params, g1e))
    total = tensor.add(tensor.add(loss1, loss2), tensor.add(loss3, loss4))
    return loss1, loss2, loss3, loss4, total


def transcode_eeg_to_fmri(params, eeg_volume):
    """F_hat = R2(G1(E)): EEG volume [11,9,5,T] -> fMRI [source grid, T/6]."""
    out = fmri_encode(params, eeg_decode(params, eeg_volume))
    return out.data


def transcode_fmri_to_eeg(params, fmri):
    """E_hat = R1(G2(F)): fMRI [...,T] -> EEG volume [11,9,5,6T]."""
    source = fmri_decode(params, fmri)
    if source.shape[:3] != params.source_grid:
        raise TensorError(
            f"fMRI grid {source.shape[:3]} does not match the trained "
            f"source grid {params.source_grid}"
        )
    return eeg_encode(params, source).data


def loso_split(sessions, held_out):
    """Partition session records by their subject tag."""
    subjects = {s["subject"] for s in sessions}
    if len(subjects) < 2:
        raise TensorError("leave-one-out needs at least 2 subjects")
    if held_out not in subjects:
        raise TensorError(f"unknown subject {held_out!r}")
    train = [s for s in sessions if s["subject"] != held_out]
    test = [s for s in sessions if s["subject"] == held_out]
    return train, test


def train(batches, params, epochs=500, lr=1e-3, seed=0, checkpoint_every=0,
          checkpoint_dir=None, log_every=25):
    """Adam over the summed cyclic loss, one window per step.

    Window order is reshuffled each epoch from the run seed. On divergence
    (a non-finite total, or overflow caught inside the forward pass)
    training aborts and the last finite-epoch parameters are restored.
    Returns (params, history) where history holds per-epoch mean loss
    components.
    """
    from .optim import OptimizerState, adam_update, zero_grads

    if not batches:
        raise TensorError("no training windows")
    param_list = params.parameters()
    state = OptimizerState(param_list, learning_rate=lr)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5bf]))
    history = []
    last_good = params.copy_state()
    for epoch in range(int(epochs)):
        order = rng.permutation(len(batches))
        sums = np.zeros(5)
        diverged = False
        for i in order:
            zero_grads(param_list)
            try:
                parts = cyclic_loss(batches[i], params)
            except TensorError as err:
                # overflow trips the finite-input guard partway through the
                # forward pass; anything else is a genuine usage error
                if "non-finite" not in str(err):
                    raise
                diverged = True
                break
            total = parts[4]
            if not np.isfinite(total.item()):
                diverged = True
                break
            backward(total, params=param_list)
            adam_update(state)
            sums += [p.item() for p in parts]
        if diverged:
            params.load_state(last_good)
            log.warning("training diverged at epoch %d; restored last checkpoint",
                        epoch)
            history.append({"epoch": epoch, "diverged": True})
            break
        entry = dict(zip(["loss1", "loss2", "loss3", "loss4", "total"],
                         sums / len(batches)))
        entry["epoch"] = epoch
        history.append(entry)
        last_good = params.copy_state()
        if log_every and epoch % log_every == 0:
            log.info("epoch %d total %.6g", epoch, entry["total"])
        if checkpoint_every and checkpoint_dir and \
                (epoch + 1) % checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"epoch{epoch + 1:04d}", params)
    return params, history


# ---------------------------------------------------------------------------
# checkpoints: text manifest plus one tensor file per parameter
# ---------------------------------------------------------------------------


def save_checkpoint(prefix, params, extra=None):
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for key, value in params.hyper.items():
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        manifest[f"hyper.{key}"] = value
    for name, stack in (("g1", params.g1), ("g2", params.g2),
                        ("r1", params.r1), ("r2", params.r2)):
        manifest[f"stack.{name}"] = str(len(stack))
        for i, layer in enumerate(stack):
            manifest[f"layer.{name}.{i}"] = layer.spec()
            storage.save_tensor(f"{prefix}.{name}.{i}.taps.tnsr",
                                layer.kernel.taps.data)
            storage.save_tensor(f"{prefix}.{name}.{i}.bias.tnsr",
                                layer.kernel.bias.data)
    if extra:
        manifest.update(extra)
    storage.save_kv(f"{prefix}.manifest", manifest)
    storage.save_mapping(f"{prefix}.layout", params.layout_mapping)
    return f"{prefix}.manifest"


def load_checkpoint(prefix):
    prefix = Path(str(prefix).removesuffix(".manifest"))
    manifest = storage.load_kv(f"{prefix}.manifest")
    hyper = {}
    for key, value in manifest.items():
        if not key.startswith("hyper."):
            continue
        name = key[len("hyper."):]
        if name in ("eeg_grid", "source_grid"):
            hyper[name] = tuple(int(v) for v in value.split(","))
        elif name == "linear":
            hyper[name] = value == "True"
        elif name in ("spatial_k", "temporal_k", "spatial_width",
                      "temporal_width", "seed"):
            hyper[name] = int(value)
        else:
            hyper[name] = value
    stacks = {}
    for name in ("g1", "g2", "r1", "r2"):
        n = int(manifest[f"stack.{name}"])
        layers = []
        for i in range(n):
            layer = Layer.from_spec(manifest[f"layer.{name}.{i}"])
            layer.kernel.taps.data = storage.load_tensor(
                f"{prefix}.{name}.{i}.taps.tnsr")
            layer.kernel.bias.data = storage.load_tensor(
                f"{prefix}.{name}.{i}.bias.tnsr")
            layers.append(layer)
        stacks[name] = layers
    mapping = storage.load_mapping(f"{prefix}.layout")
    return TranscoderParams(stacks["g1"], stacks["g2"], stacks["r1"],
                            stacks["r2"], hyper, mapping)
