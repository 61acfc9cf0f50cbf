import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neubrdf.brdf_data import (MERL_FILE_BYTES, MERL_RES, BidirSamples, GgxParams, Lambertian,
                               MerlFormatError, MerlTable, SampleListError, build_dataset,
                               descriptor_table, ggx_eval, ggx_ndf, halfdiff_to_io,
                               io_to_halfdiff, io_to_halfdiff_full, isotropic_reparam,
                               load_merl, load_svbrdf_dir, merl_enumerate, merl_lookup,
                               read_sample_list, theta_half_index, write_merl,
                               write_sample_list)
from neubrdf.healpix import SphereCoord


def upper(rng, n):
    return SphereCoord(np.arccos(rng.uniform(0.02, 1, n)), rng.uniform(0, 2 * np.pi, n))


@pytest.fixture(scope="module")
def merl_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("merl") / "synthetic.binary"
    raw = np.random.default_rng(0).uniform(0, 10, (3,) + MERL_RES)
    write_merl(MerlTable(raw), path)
    return path


class TestMerl:
    def test_file_size(self):
        assert MERL_FILE_BYTES == 34_992_012

    def test_round_trip_bytes(self, merl_file, tmp_path):
        out = tmp_path / "copy.binary"
        write_merl(load_merl(merl_file), out)
        assert out.read_bytes() == merl_file.read_bytes()

    def test_zero_payload(self, tmp_path):
        path = tmp_path / "zero.binary"
        write_merl(MerlTable(np.zeros((3,) + MERL_RES)), path)
        assert not load_merl(path).rgb.any()

    def test_wrong_size_rejected(self, tmp_path):
        path = tmp_path / "short.binary"
        path.write_bytes(struct.pack("<3i", 90, 90, 180) + b"\0" * 16)
        with pytest.raises(MerlFormatError, match="34992012"):
            load_merl(path)

    def test_bad_header_rejected(self, merl_file, tmp_path):
        path = tmp_path / "bad.binary"
        path.write_bytes(struct.pack("<3i", 90, 90, 90) + merl_file.read_bytes()[12:])
        with pytest.raises(MerlFormatError):
            load_merl(path)

    def test_enumeration_count(self, merl_file):
        wi, wo, rgb, valid = merl_enumerate(load_merl(merl_file))
        assert len(rgb) == 90 * 90 * 180 == 1_458_000
        assert 0 < valid.sum() < len(rgb)

    def test_lookup_returns_enumerated_entries(self, merl_file):
        table = load_merl(merl_file)
        wi, wo, rgb, valid = merl_enumerate(table)
        idx = np.flatnonzero(valid)[::997]
        np.testing.assert_allclose(merl_lookup(table, wi[idx], wo[idx]), rgb[idx])

    def test_theta_half_bins(self):
        np.testing.assert_array_equal(theta_half_index([0.0, np.pi / 2, 2.0]), [0, 89, 89])

    def test_negative_raw_clamped(self):
        raw = np.full((3,) + MERL_RES, -1.0)
        assert MerlTable(raw).rgb.max() == 0.0


class TestHalfDiff:
    def test_normal_pair(self):
        th, td, _ = io_to_halfdiff(SphereCoord(0.0, 0.0), SphereCoord(0.0, 0.0))
        assert th == pytest.approx(0.0, abs=1e-12) and td == pytest.approx(0.0, abs=1e-7)

    def test_mirror_pair(self):
        th, td, _ = io_to_halfdiff(SphereCoord(np.pi / 4, 0.0), SphereCoord(np.pi / 4, np.pi))
        assert th == pytest.approx(0.0, abs=1e-12)
        assert td == pytest.approx(np.pi / 4)

    def test_round_trip(self):
        rng = np.random.default_rng(1)
        wi, wo = upper(rng, 10_000), upper(rng, 10_000)
        th, ph, td, pd = io_to_halfdiff_full(wi, wo)
        bi, bo = halfdiff_to_io(th, td, pd, ph)
        for a, b in ((wi, bi), (wo, bo)):
            ang = np.arccos(np.clip(np.sum(a.to_vectors() * b.to_vectors(), -1), -1, 1))
            assert ang.max() < 1e-6

    def test_folded_round_trip_up_to_rotation(self):
        """Folding discards the half-vector azimuth, so compare invariants."""
        rng = np.random.default_rng(2)
        wi, wo = upper(rng, 1000), upper(rng, 1000)
        th, td, pd = io_to_halfdiff(wi, wo)
        bi, bo = halfdiff_to_io(th, td, pd)
        dot = lambda a, b: np.sum(a.to_vectors() * b.to_vectors(), -1)
        np.testing.assert_allclose(dot(bi, bo), dot(wi, wo), atol=1e-9)
        np.testing.assert_allclose(np.sort(np.c_[bi.theta, bo.theta], 1),
                                   np.sort(np.c_[wi.theta, wo.theta], 1), atol=1e-7)


class TestGgx:
    def test_ndf_at_peak(self):
        assert float(ggx_ndf(np.array([0.0, 0.0, 1.0]), 1.0, 1.0)) == pytest.approx(1 / np.pi)
        assert float(ggx_ndf(np.array([0.0, 0.0, 1.0]), 0.3, 0.3)) == pytest.approx(1 / (np.pi * 0.09))

    def test_reciprocity(self):
        rng = np.random.default_rng(3)
        wi, wo = upper(rng, 10_000), upper(rng, 10_000)
        p = GgxParams(alpha=0.2, alpha_x=0.2, alpha_y=0.5)
        np.testing.assert_allclose(ggx_eval(p, wi, wo), ggx_eval(p, wo, wi), rtol=1e-9, atol=0)

    def test_anisotropy_breaks_azimuth_invariance(self):
        wi, wo = SphereCoord(0.6, 0.1), SphereCoord(0.7, 0.1 + np.pi)
        turn = lambda d: SphereCoord(d.theta, d.phi + np.pi / 2)
        aniso = GgxParams(alpha_x=0.1, alpha_y=0.6)
        iso = GgxParams(alpha=0.3)
        assert not np.allclose(aniso.eval(wi, wo), aniso.eval(turn(wi), turn(wo)))
        np.testing.assert_allclose(iso.eval(wi, wo), iso.eval(turn(wi), turn(wo)))

    def test_invalid_params(self):
        for kw in ({"alpha": 0.0}, {"alpha": 1.5}, {"f0": (2, 0, 0)}, {"albedo": (-1, 0, 0)}):
            with pytest.raises(ValueError):
                GgxParams(**kw)

    def test_lambertian_constant(self):
        rng = np.random.default_rng(4)
        np.testing.assert_allclose(Lambertian((0.5, 0.2, 0.1)).eval(upper(rng, 5), upper(rng, 5)),
                                   np.tile(np.array([0.5, 0.2, 0.1]) / np.pi, (5, 1)))


class TestIsotropicReparam:
    def test_equal_azimuth(self):
        wi, wo = isotropic_reparam(SphereCoord(0.3, 1.2), SphereCoord(0.5, 1.2))
        assert float(wi.phi) == 0.0 and float(wo.phi) == 0.0

    def test_fold(self):
        _, wo = isotropic_reparam(SphereCoord(0.3, 0.0), SphereCoord(0.5, 1.5 * np.pi))
        assert float(wo.phi) == pytest.approx(np.pi / 2)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0, 1.5), st.floats(0, 6.28), st.floats(0, 1.5), st.floats(0, 6.28))
    def test_ggx_invariant(self, ti, pi_, to, po):
        p = GgxParams(alpha=0.3)
        wi, wo = SphereCoord(ti, pi_), SphereCoord(to, po)
        ri, ro = isotropic_reparam(wi, wo)
        np.testing.assert_allclose(p.eval(ri, ro), p.eval(wi, wo), rtol=1e-7)
        assert 0.0 <= float(ro.phi) <= np.pi


class TestSampleLists:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        s = BidirSamples(upper(rng, 448), upper(rng, 448), rng.uniform(0, 1, (448, 3)))
        path = tmp_path / "s.txt"
        write_sample_list(s, path)
        back = read_sample_list(path)
        assert len(back) == 448
        np.testing.assert_array_equal(back.rgb, s.rgb)
        train, held = build_dataset(path, split=1.0)
        assert len(train) == 448 and len(held) == 0

    def test_errors(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("0.1 0 0.2 0 1 2\n")
        with pytest.raises(SampleListError, match=":1:"):
            read_sample_list(path)
        path.write_text("# only comments\n")
        with pytest.raises(SampleListError):
            read_sample_list(path)
        path.write_text("2.0 0 0.2 0 1 1 1\n")
        with pytest.raises(SampleListError, match="horizon"):
            read_sample_list(path)
        with pytest.raises(FileNotFoundError):
            read_sample_list(tmp_path / "missing.txt")

    def test_direction_only_rows(self, tmp_path):
        path = tmp_path / "dirs.txt"
        path.write_text("0.1 0 0.2 0\n0.3 1 0.4 2\n")
        s = read_sample_list(path, require_rgb=False)
        assert len(s) == 2 and not s.rgb.any()

    def test_svbrdf_dir(self, tmp_path):
        (tmp_path / "a.txt").write_text("0.1 0 0.2 0 1 1 1\n")
        (tmp_path / "b.txt").write_text("0.1 0 0.2 0 2 2 2\n0.2 0 0.3 0 2 2 2\n")
        (tmp_path / "manifest.txt").write_text("a.txt 0.25 0.5\nb.txt 0.75 0.5\n")
        s = load_svbrdf_dir(tmp_path)
        np.testing.assert_array_equal(s.uv, [[0.25, 0.5], [0.75, 0.5], [0.75, 0.5]])


class TestBuildDataset:
    def test_split_sizes_reproducible(self):
        a, b = build_dataset(GgxParams(), count=1000, split=0.9, seed=3)
        c, d = build_dataset(GgxParams(), count=1000, split=0.9, seed=3)
        assert (len(a), len(b)) == (900, 100)
        np.testing.assert_array_equal(a.rgb, c.rgb)
        np.testing.assert_array_equal(b.wi.theta, d.wi.theta)

    def test_samples_valid(self):
        tr, he = build_dataset(GgxParams(alpha_x=0.1, alpha_y=0.4), count=100_000, seed=4)
        for s in (tr, he):
            assert np.all((s.wi.theta >= 0) & (s.wi.theta <= np.pi / 2))
            assert np.all((s.wo.theta >= 0) & (s.wo.theta <= np.pi / 2))
            assert np.all((s.wi.phi >= 0) & (s.wi.phi < 2 * np.pi))
            assert np.all(np.isfinite(s.rgb)) and np.all(s.rgb >= 0)

    def test_merl_drops_below_horizon(self, merl_file):
        tr, he = build_dataset(load_merl(merl_file), strategy="subsample", count=5000, seed=0)
        assert len(tr) + len(he) == 5000
        assert tr.wi.theta.max() <= np.pi / 2 and tr.wo.theta.max() <= np.pi / 2

    def test_isotropic_option(self):
        tr, _ = build_dataset(GgxParams(), count=200, isotropic=True)
        assert not tr.wi.phi.any()
        assert tr.wo.phi.max() <= np.pi

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            build_dataset(GgxParams())
        with pytest.raises(TypeError):
            build_dataset(42)
        with pytest.raises(ValueError):
            build_dataset(GgxParams(), count=10, split=0.0)

    def test_descriptor_shapes(self, merl_file):
        assert descriptor_table(load_merl(merl_file)).shape == (3, 15, 15, 30)
        d = descriptor_table(GgxParams())
        assert d.shape == (3, 15, 15, 30) and np.all(d >= 0)
