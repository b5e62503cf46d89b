import numpy as np
import pytest

from agcm_model import AgcmParams
from colorpipe import EncodedImage
from errors import ParameterError
from le_model import LeParams, LeTrainConfig, agcm_stage, count_params, le_forward, le_tensor, predict_le, train_le
from tensor_core import to_batch


def pq_image(rng, h, w) -> EncodedImage:
    return EncodedImage(rng.uniform(size=(h, w, 3)), "pq", "bt2020", 16, True)


class TestArchitecture:
    def test_full_scale_parameter_count(self):
        params = LeParams.create(channels=64, n_blocks=16)
        assert count_params(params) == 1369859

    def test_desk_scale_layers(self):
        params = LeParams.create()
        assert params.channels == 32 and params.n_blocks == 4
        assert params["up.weight"].shape == (128, 32, 3, 3)
        assert params["tail.1.weight"].shape == (3, 32, 3, 3)

    def test_unknown_init(self):
        with pytest.raises(ParameterError):
            LeParams.create(init="orthogonal")

    def test_identity_needs_twelve_channels(self):
        with pytest.raises(ParameterError):
            LeParams.create(channels=8, init="identity")

    def test_resolution_is_preserved(self, rng):
        params = LeParams.create(channels=12, n_blocks=1, seed=3)
        out = le_tensor(params, to_batch(rng.uniform(size=(2, 8, 10, 3))))
        assert out.shape == (2, 3, 8, 10)


class TestForward:
    def test_identity_init_is_exact_identity(self, rng):
        img = pq_image(rng, 12, 16)
        out = le_forward(img, LeParams.create(channels=16, n_blocks=2, init="identity"))
        assert np.allclose(out.codes, img.codes, atol=1e-6)

    def test_odd_sides_are_padded_and_cropped(self, rng):
        img = pq_image(rng, 9, 13)
        out = le_forward(img, LeParams.create(channels=12, n_blocks=1, init="identity"))
        assert out.codes.shape == (9, 13, 3)
        assert np.allclose(out.codes, img.codes, atol=1e-6)

    def test_tensor_level_rejects_odd_sides(self, rng):
        with pytest.raises(ParameterError):
            le_tensor(LeParams.create(channels=12, n_blocks=1), to_batch(rng.uniform(size=(7, 8, 3))))

    def test_receptive_field_is_local(self, rng):
        """A change in one corner leaves the far corner untouched."""
        params = LeParams.create(channels=12, n_blocks=1, seed=2)
        img = pq_image(rng, 32, 32)
        codes = img.codes.copy()
        codes[:2, :2] = 1.0 - codes[:2, :2]
        a, b = le_forward(img, params).codes, le_forward(img.with_codes(codes), params).codes
        assert np.array_equal(a[-8:, -8:], b[-8:, -8:])
        assert not np.allclose(a[:2, :2], b[:2, :2])

    def test_chunked_prediction_matches_single(self, rng):
        params = LeParams.create(channels=12, n_blocks=1, seed=1)
        x = rng.uniform(size=(10, 8, 8, 3))
        batched = predict_le(params, x)
        single = le_forward(EncodedImage(x[9], "pq"), params).codes
        assert np.allclose(batched[9], single, atol=1e-6)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, rng):
        params = LeParams.create(channels=12, n_blocks=3, seed=8)
        params.save(tmp_path / "le.htvw")
        loaded = LeParams.load(tmp_path / "le.htvw")
        assert (loaded.channels, loaded.n_blocks) == (12, 3)
        img = pq_image(rng, 8, 8)
        assert np.array_equal(le_forward(img, loaded).codes, le_forward(img, params).codes)

    def test_wrong_model_kind(self, tmp_path):
        AgcmParams.create(width=8).save(tmp_path / "agcm.htvw")
        with pytest.raises(ParameterError):
            LeParams.load(tmp_path / "agcm.htvw")


class TestTraining:
    def test_agcm_stage_is_sixteen_bit(self, small_dataset):
        x = agcm_stage(AgcmParams.create(width=8, seed=1), small_dataset.sdr_codes([0, 1]), cond_size=32)
        assert x.min() >= 0.0 and x.max() <= 1.0
        assert np.allclose(x * 65535, np.round(x * 65535))

    def test_agcm_is_frozen(self, small_dataset):
        agcm = AgcmParams.create(width=8, seed=1)
        before = agcm.state_dict()
        train_le(small_dataset, agcm, LeTrainConfig(steps=2, channels=12, n_blocks=1, cond_size=32))
        after = agcm.state_dict()
        assert all(np.array_equal(before[k], after[k]) for k in before)

    def test_same_seed_same_weights(self, small_dataset):
        agcm = AgcmParams.create(width=8, seed=1)
        config = LeTrainConfig(steps=2, channels=12, n_blocks=1, cond_size=32, seed=4)
        a, _ = train_le(small_dataset, agcm, config)
        b, _ = train_le(small_dataset, agcm, config)
        assert all(np.array_equal(a[k].data, b[k].data) for k in a.tensors)

    @pytest.mark.slow
    def test_training_reduces_loss(self, small_dataset):
        agcm = AgcmParams.identity(16, n_ccb=0)
        config = LeTrainConfig(steps=120, channels=12, n_blocks=1, lr=5e-4, log_every=10, val_every=60)
        _, log = train_le(small_dataset, agcm, config)
        assert log.rows[-1][1] < log.rows[0][1]
