import numpy as np
import pytest

from agcm_model import AgcmParams, agcm_forward, apply_condition, condition_forward, condition_input
from colorpipe import EncodedImage
from errors import FormatError, ParameterError
from luttools import (
    Lut3D,
    apply_lut,
    cube_text,
    export_lut,
    lattice_grid,
    lattice_jumps,
    lut_point_cloud,
    make_testcard,
    read_cube,
    write_cube,
)


def sdr(codes) -> EncodedImage:
    return EncodedImage(np.asarray(codes, dtype=np.float64), "gamma2p2", "bt709", 8, True)


class TestLattice:
    def test_grid_order(self):
        grid = lattice_grid(3)
        assert grid.shape == (3, 3, 3, 3)
        assert np.array_equal(grid[2, 1, 0], [1.0, 0.5, 0.0])

    def test_identity_lut_is_identity(self, rng):
        img = sdr(rng.uniform(size=(5, 5, 3)))
        assert np.allclose(apply_lut(Lut3D.identity(9), img).codes, img.codes)

    def test_lattice_points_are_exact(self):
        lut = Lut3D(np.random.default_rng(0).uniform(size=(5, 5, 5, 3)))
        img = sdr(lattice_grid(5).reshape(1, -1, 3))
        assert np.array_equal(apply_lut(lut, img).codes[0], lut.table.reshape(-1, 3))

    def test_midpoint_is_average(self):
        table = np.zeros((2, 2, 2, 3))
        table[1, 1, 1] = 1.0
        out = apply_lut(Lut3D(table), sdr(np.full((1, 1, 3), 0.5)))
        assert np.allclose(out.codes, 1.0 / 8.0)

    def test_inputs_are_clamped(self):
        out = apply_lut(Lut3D.identity(5), EncodedImage(np.array([[[-0.2, 1.4, 0.5]]])))
        assert np.allclose(out.codes, [[[0.0, 1.0, 0.5]]])

    @pytest.mark.parametrize("size", [1, 66])
    def test_size_limits(self, size):
        with pytest.raises(ParameterError):
            Lut3D(np.zeros((size, size, size, 3)))

    def test_jumps(self):
        assert lattice_jumps(Lut3D.identity(5), "all") == pytest.approx(0.25)
        with pytest.raises(ParameterError):
            lattice_jumps(Lut3D.identity(5), "shadows")


class TestExport:
    def test_lut_matches_network_on_lattice(self, sdr_image):
        model = AgcmParams.create(width=16, seed=6)
        lut = export_lut(model, sdr_image, size=5, threads=2, cond_size=32)
        v = condition_forward(condition_input(sdr_image, 32, model.n_ccb), model)
        assert np.allclose(lut.condition.values, v.values)
        # a lattice image pushed through the network gives the table back
        lattice_img = EncodedImage(lattice_grid(5).reshape(1, -1, 3), "gamma2p2", "bt709", 16, False)
        direct = apply_condition(lattice_img, model, v).codes.reshape(5, 5, 5, 3)
        assert np.allclose(lut.table, direct, atol=1e-6)

    def test_identity_model_gives_identity_lut(self):
        lut = export_lut(AgcmParams.identity(8, n_ccb=0), None, size=9)
        assert np.allclose(lut.table, lattice_grid(9), atol=1e-6)

    def test_applied_lut_approximates_model(self, sdr_image):
        model = AgcmParams.create(width=16, seed=6, n_ccb=0)
        lut = export_lut(model, None, size=33)
        err = np.abs(apply_lut(lut, sdr_image).codes - agcm_forward(sdr_image, model).codes)
        assert err.max() < 0.05

    def test_conditioned_model_needs_source(self):
        with pytest.raises(ParameterError):
            export_lut(AgcmParams.create(width=8), None, size=3)

    def test_size_checked(self):
        with pytest.raises(ParameterError):
            export_lut(AgcmParams.create(width=8, n_ccb=0), None, size=70)


class TestCubeFile:
    def test_roundtrip(self, tmp_path, rng):
        lut = Lut3D(rng.uniform(size=(4, 4, 4, 3)), "graded")
        write_cube(lut, tmp_path / "a.cube")
        back = read_cube(tmp_path / "a.cube")
        assert back.title == "graded"
        assert np.allclose(back.table, lut.table, atol=1e-9)

    def test_red_varies_fastest(self):
        lines = cube_text(Lut3D.identity(2)).splitlines()
        body = [line for line in lines if line[0].isdigit()]
        assert body[:3] == [
            "0.0000000000 0.0000000000 0.0000000000",
            "1.0000000000 0.0000000000 0.0000000000",
            "0.0000000000 1.0000000000 0.0000000000",
        ]

    def test_bad_entry_names_line(self, tmp_path):
        (tmp_path / "b.cube").write_text("LUT_3D_SIZE 2\n0 0 0\n0 0\n")
        with pytest.raises(FormatError, match="line 3"):
            read_cube(tmp_path / "b.cube")

    def test_wrong_entry_count(self, tmp_path):
        (tmp_path / "c.cube").write_text("LUT_3D_SIZE 2\n0 0 0\n")
        with pytest.raises(FormatError):
            read_cube(tmp_path / "c.cube")

    def test_missing_size(self, tmp_path):
        (tmp_path / "d.cube").write_text("# nothing\n")
        with pytest.raises(FormatError):
            read_cube(tmp_path / "d.cube")

    def test_unsupported_1d(self, tmp_path):
        (tmp_path / "e.cube").write_text("LUT_1D_SIZE 4\n")
        with pytest.raises(FormatError):
            read_cube(tmp_path / "e.cube")


class TestPointCloud:
    def test_ply_layout(self, tmp_path):
        lut = lut_point_cloud(AgcmParams.identity(8, n_ccb=0), None, 3, tmp_path / "c.ply")
        lines = (tmp_path / "c.ply").read_text().splitlines()
        assert lines[0] == "ply"
        assert "element vertex 27" in lines
        body = lines[lines.index("end_header") + 1:]
        assert len(body) == 27
        assert body[1].split()[3:] == ["128", "0", "0"]
        assert lut.size == 3


class TestTestcard:
    def test_layout(self):
        card = make_testcard()
        assert card.codes.shape == (256, 448, 3)
        assert (card.transfer, card.bit_depth) == ("gamma2p2", 8)
        assert np.allclose(card.codes * 255, np.round(card.codes * 255))

    def test_top_row_clips_and_bottom_is_mid_tone(self):
        card = make_testcard(70, 64)
        assert card.codes[0].max() == 1.0
        assert card.codes[-1].max() == pytest.approx(128 / 255)

    def test_neutral_band_is_grey(self):
        card = make_testcard()
        neutral = card.codes[:, -10:]
        assert np.array_equal(neutral[..., 0], neutral[..., 1])

    def test_minimum_size(self):
        with pytest.raises(ParameterError):
            make_testcard(32, 64)
