"""Transcoder wiring: module stacks, the four-path loss, training loop,
checkpoints."""

import numpy as np
import pytest

from neurotranscode import transcoder
from neurotranscode.tensor import TensorError
from neurotranscode.transcoder import (
    Layer,
    TEMPORAL_FACTOR,
    TrainBatch,
    cyclic_loss,
    eeg_decode,
    eeg_encode,
    fmri_decode,
    fmri_encode,
    init_params,
    load_checkpoint,
    loso_split,
    save_checkpoint,
    train,
    transcode_eeg_to_fmri,
    transcode_fmri_to_eeg,
)

MAPPING = {0: (0, 0, 0), 1: (1, 1, 1), 2: (2, 2, 1)}


def small_params(linear=True, init_noise=0.0, seed=0, source_grid=(3, 3, 2),
                 temporal_width=2, spatial_width=2):
    return init_params(MAPPING, eeg_grid=(3, 3, 2), source_grid=source_grid,
                       spatial_width=spatial_width,
                       temporal_width=temporal_width, linear=linear,
                       init_noise=init_noise, seed=seed)


def small_batch(rng, T=12):
    eeg = rng.standard_normal((3, 3, 2, T))
    fmri = rng.standard_normal((3, 3, 2, T))
    return TrainBatch(eeg, fmri)


class TestLayer:
    def test_spec_round_trip(self):
        layer = Layer("temporal", 1, 4, 9, stride=6, transposed=True,
                      activation=True)
        twin = Layer.from_spec(layer.spec())
        assert twin.spec() == layer.spec()
        assert twin.kernel.taps.shape == layer.kernel.taps.shape
        assert twin.kernel.bias.shape == layer.kernel.bias.shape

    def test_transposed_kernel_declared_backwards(self):
        fwd = Layer("temporal", 2, 3, 5)
        rev = Layer("temporal", 2, 3, 5, transposed=True)
        assert fwd.kernel.taps.shape == (5, 2, 3)
        assert rev.kernel.taps.shape == (5, 3, 2)
        assert len(rev.kernel.bias.data) == 3

    def test_strided_forward_shapes(self, rng):
        x = rng.standard_normal((2, 2, 2, 12, 1))
        down = Layer("temporal", 1, 1, 9, stride=6)
        assert down.forward(x).shape == (2, 2, 2, 2, 1)
        up = Layer("temporal", 1, 1, 9, stride=6, transposed=True)
        assert up.forward(x).shape == (2, 2, 2, 72, 1)

    def test_activation_flag(self):
        x = np.full((1, 1, 1, 4, 1), -1.0)
        plain = Layer("temporal", 1, 1, 1, init_noise=0.0)
        act = Layer("temporal", 1, 1, 1, activation=True, init_noise=0.0)
        np.testing.assert_allclose(plain.forward(x).data, -1.0)
        np.testing.assert_allclose(act.forward(x).data, -0.1)


class TestParamsGeometry:
    def test_module_kind_enforced(self):
        p = small_params()
        with pytest.raises(TensorError, match="spatial"):
            transcoder.TranscoderParams(p.g2, p.g2, p.r1, p.r2, p.hyper,
                                        MAPPING)
        with pytest.raises(TensorError, match="temporal"):
            transcoder.TranscoderParams(p.g1, p.g1, p.r1, p.r2, p.hyper,
                                        MAPPING)

    def test_eeg_flat_indices(self):
        p = small_params()
        # (x * ny + y) * nz + z on the (3, 3, 2) grid
        np.testing.assert_array_equal(p.eeg_flat_indices(), [0, 9, 17])

    def test_parameters_cover_all_stacks(self):
        p = small_params()
        n_layers = len(p.g1) + len(p.g2) + len(p.r1) + len(p.r2)
        assert len(p.parameters()) == 2 * n_layers

    def test_state_round_trip(self, rng):
        p = small_params(init_noise=1e-2)
        state = p.copy_state()
        for t in p.parameters():
            t.data = t.data + 1.0
        p.load_state(state)
        for t, d in zip(p.parameters(), state):
            np.testing.assert_array_equal(t.data, d)


class TestModuleShapes:
    def test_eeg_decode_resizes_to_source_grid(self, rng):
        p = small_params(source_grid=(4, 4, 4))
        out = eeg_decode(p, rng.standard_normal((3, 3, 2, 7)))
        assert out.shape == (4, 4, 4, 7)

    def test_eeg_encode_resizes_to_eeg_grid(self, rng):
        p = small_params(source_grid=(4, 4, 4))
        out = eeg_encode(p, rng.standard_normal((4, 4, 4, 7)))
        assert out.shape == (3, 3, 2, 7)

    def test_temporal_modules_scale_time(self, rng):
        p = small_params()
        f = rng.standard_normal((3, 3, 2, 5))
        up = fmri_decode(p, f)
        assert up.shape == (3, 3, 2, 30)
        down = fmri_encode(p, rng.standard_normal((3, 3, 2, 30)))
        assert down.shape == (3, 3, 2, 5)

    def test_temporal_modules_ignore_spatial_grid(self, rng):
        # G2/R2 carry no spatial kernels, so any grid passes through
        p = small_params(source_grid=(4, 4, 4))
        out = fmri_decode(p, rng.standard_normal((2, 5, 3, 4)))
        assert out.shape == (2, 5, 3, 24)

    def test_eeg_grid_checked(self, rng):
        p = small_params()
        with pytest.raises(TensorError, match="EEG grid"):
            eeg_decode(p, rng.standard_normal((4, 4, 4, 6)))
        with pytest.raises(TensorError, match="source grid"):
            eeg_encode(p, rng.standard_normal((4, 4, 4, 6)))

    def test_time_divisibility_checked(self, rng):
        p = small_params()
        with pytest.raises(TensorError, match="divisible"):
            fmri_encode(p, rng.standard_normal((3, 3, 2, 13)))

    def test_transfer_across_time_extents(self, rng):
        # spatial-only G1 runs unchanged on a 600-sample epoch timeline
        p = small_params(init_noise=1e-2)
        out = eeg_decode(p, rng.standard_normal((3, 3, 2, 600)))
        assert out.shape == (3, 3, 2, 600)


class TestTrainBatch:
    def test_mismatched_windows_rejected(self, rng):
        with pytest.raises(TensorError, match="differ"):
            TrainBatch(rng.standard_normal((3, 3, 2, 12)),
                       rng.standard_normal((3, 3, 2, 18)))


def compose_losses(batch, params):
    """The four paths assembled independently from the public pieces."""
    f_nat = batch.fmri[..., ::TEMPORAL_FACTOR]
    mask = params.eeg_flat_indices()

    def chan(a):
        return a.reshape(-1, a.shape[-1])[mask]

    g1e = eeg_decode(params, batch.eeg).data
    g2f = fmri_decode(params, f_nat).data
    e_chan = chan(batch.eeg)
    l1 = ((e_chan - chan(eeg_encode(params, g1e).data)) ** 2).sum()
    l2 = ((f_nat - fmri_encode(params, g2f).data) ** 2).sum()
    l3 = ((e_chan - chan(eeg_encode(params, g2f).data)) ** 2).sum()
    l4 = ((f_nat - fmri_encode(params, g1e).data) ** 2).sum()
    return l1, l2, l3, l4, l1 + l2 + l3 + l4


class TestCyclicLoss:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    @pytest.mark.parametrize("linear", [True, False])
    def test_matches_composition_oracle(self, seed, linear):
        rng = np.random.default_rng(seed)
        p = small_params(linear=linear, init_noise=1e-2, seed=seed)
        batch = small_batch(rng)
        got = [part.item() for part in cyclic_loss(batch, p)]
        want = compose_losses(batch, p)
        for g, w in zip(got, want):
            assert abs(g - w) <= 1e-12 * max(1.0, abs(w))

    def test_total_is_plain_sum(self, rng):
        p = small_params(init_noise=1e-2)
        parts = cyclic_loss(small_batch(rng), p)
        np.testing.assert_allclose(parts[4].item(),
                                   sum(part.item() for part in parts[:4]),
                                   rtol=1e-12)

    def test_fabricated_fixed_point_is_exactly_zero(self, rng):
        # with matched grids and exact impulse kernels the stacks are the
        # identity / zero-stuffing / stride-readback maps, so a window built
        # as E = zero-stuffed F sits at the consistency fixed point
        p = small_params(linear=True, init_noise=0.0)
        f = rng.standard_normal((3, 3, 2, 2))
        e = np.zeros((3, 3, 2, 12))
        e[..., ::TEMPORAL_FACTOR] = f
        parts = cyclic_loss(TrainBatch(e, e), p)
        for part in parts:
            assert part.item() == 0.0

    def test_gradients_flow_to_every_parameter(self, rng):
        from neurotranscode.tensor import backward
        p = small_params(linear=False, init_noise=1e-2)
        parts = cyclic_loss(small_batch(rng), p)
        backward(parts[4], params=p.parameters())
        for t in p.parameters():
            assert t.grad is not None
            assert np.any(t.grad != 0.0)


class TestLosoSplit:
    SESSIONS = [
        {"name": "S01r1", "subject": "S01"},
        {"name": "S01r2", "subject": "S01"},
        {"name": "S02r1", "subject": "S02"},
    ]

    def test_partition(self):
        train_recs, test_recs = loso_split(self.SESSIONS, "S02")
        assert [r["name"] for r in train_recs] == ["S01r1", "S01r2"]
        assert [r["name"] for r in test_recs] == ["S02r1"]

    def test_unknown_subject(self):
        with pytest.raises(TensorError, match="unknown subject"):
            loso_split(self.SESSIONS, "S09")

    def test_needs_two_subjects(self):
        with pytest.raises(TensorError, match="at least 2"):
            loso_split(self.SESSIONS[:2], "S01")


class TestTrain:
    def batches(self, rng, n=2):
        return [small_batch(rng) for _ in range(n)]

    def test_zero_epochs_no_op(self, rng):
        p = small_params(init_noise=1e-2)
        before = p.copy_state()
        p, history = train(self.batches(rng), p, epochs=0)
        assert history == []
        for t, d in zip(p.parameters(), before):
            np.testing.assert_array_equal(t.data, d)

    def test_loss_decreases(self, rng):
        p = small_params(init_noise=1e-2)
        p, history = train(self.batches(rng), p, epochs=10, lr=1e-2,
                           log_every=0)
        assert history[-1]["total"] < history[0]["total"]
        assert {"loss1", "loss2", "loss3", "loss4", "total", "epoch"} <= \
            set(history[0])

    def test_deterministic(self, rng):
        batches = self.batches(rng)
        runs = []
        for _ in range(2):
            p = small_params(init_noise=1e-2)
            p, history = train(batches, p, epochs=3, lr=1e-3, seed=4,
                               log_every=0)
            runs.append((p.copy_state(), history))
        for a, b in zip(runs[0][0], runs[1][0]):
            np.testing.assert_array_equal(a, b)
        assert runs[0][1] == runs[1][1]

    def test_divergence_stops_and_restores(self, rng):
        p = small_params(init_noise=1e-2)
        p.g2[0].kernel.taps.data[:] = np.nan
        before = p.copy_state()
        p, history = train(self.batches(rng), p, epochs=5, log_every=0)
        assert history == [{"epoch": 0, "diverged": True}]
        for t, d in zip(p.parameters(), before):
            np.testing.assert_array_equal(t.data, d)

    def test_empty_batches_rejected(self):
        with pytest.raises(TensorError, match="no training windows"):
            train([], small_params(), epochs=1)


class TestTranscodeDirections:
    def test_eeg_to_fmri_shape(self, rng):
        p = small_params(init_noise=1e-2, source_grid=(4, 4, 4))
        out = transcode_eeg_to_fmri(p, rng.standard_normal((3, 3, 2, 12)))
        assert out.shape == (4, 4, 4, 2)

    def test_fmri_to_eeg_shape(self, rng):
        p = small_params(init_noise=1e-2, source_grid=(4, 4, 4))
        out = transcode_fmri_to_eeg(p, rng.standard_normal((4, 4, 4, 3)))
        assert out.shape == (3, 3, 2, 18)

    def test_fmri_grid_must_match_trained_source_grid(self, rng):
        p = small_params(source_grid=(4, 4, 4))
        with pytest.raises(TensorError, match="trained"):
            transcode_fmri_to_eeg(p, rng.standard_normal((2, 2, 2, 3)))

    def test_identity_params_transcode_is_stride_readback(self, rng):
        p = small_params(linear=True, init_noise=0.0)
        e = rng.standard_normal((3, 3, 2, 12))
        np.testing.assert_array_equal(transcode_eeg_to_fmri(p, e),
                                      e[..., ::TEMPORAL_FACTOR])


class TestCheckpoints:
    def test_round_trip(self, rng, tmp_path):
        p = small_params(linear=False, init_noise=1e-2, seed=3)
        save_checkpoint(tmp_path / "ck", p, extra={"note": "unit"})
        q = load_checkpoint(tmp_path / "ck")
        assert q.eeg_grid == p.eeg_grid
        assert q.source_grid == p.source_grid
        assert q.hyper["linear"] == p.hyper["linear"]
        assert q.layout_mapping == p.layout_mapping
        for a, b in zip(p.parameters(), q.parameters()):
            np.testing.assert_array_equal(a.data, b.data)
        e = rng.standard_normal((3, 3, 2, 12)).astype(np.float32)
        np.testing.assert_array_equal(transcode_eeg_to_fmri(p, e),
                                      transcode_eeg_to_fmri(q, e))

    def test_manifest_suffix_accepted(self, tmp_path):
        p = small_params()
        manifest = save_checkpoint(tmp_path / "ck", p)
        q = load_checkpoint(manifest)
        assert q.source_grid == p.source_grid
