import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neubrdf.healpix import HealpixGrid, SphereCoord, hemisphere_point_count
from neubrdf.sphgrid import (Codebook, DomainError, Hemisphere, Mode, SphericalIndexGrid,
                             _idw, compression_ratio, dense_parameter_count, interp_weights,
                             packed_grid_bits, prune, query_bidir, query_hemi, soft_lookup,
                             softmax)


def random_grid(nside=4, b=5, k=3, seed=0):
    rng = np.random.default_rng(seed)
    sg = SphericalIndexGrid(nside, b)
    sg.indices = rng.integers(0, 2 ** b, sg.size)
    cb = Codebook(rng.normal(size=(2 ** b, k)))
    return sg, cb


def upper_dirs(rng, n, top=np.pi / 2):
    return SphereCoord(np.arccos(rng.uniform(np.cos(top), 1, n)), rng.uniform(0, 2 * np.pi, n))


class TestWeights:
    def test_runtime_is_quarter(self):
        g = HealpixGrid(4)
        w = interp_weights(SphereCoord([0.3, 1.0], [0.1, 2.0]), [3, 40], g, Mode.RUNTIME)
        np.testing.assert_array_equal(w, np.full((2, 4), 0.25))

    def test_training_at_corner(self):
        g = HealpixGrid(4)
        p = 37
        corner = g.vertex_coord(g.pixel_corner_table[p, 2])
        w = interp_weights(corner, p, g, Mode.TRAINING)
        np.testing.assert_allclose(w, [0, 0, 1, 0], atol=1e-6)

    def test_training_equidistant(self):
        # four corners on a circle of colatitude 0.2 around the pole
        phi = np.array([0, 0.5, 1.0, 1.5]) * np.pi
        corners = SphereCoord(np.full(4, 0.2), phi).to_vectors()
        w = _idw(np.array([0.0, 0.0, 1.0]), corners)
        np.testing.assert_allclose(w, 0.25, atol=1e-12)

    def test_training_symmetry_at_belt_centre(self):
        g = HealpixGrid(1)
        w = interp_weights(g.pix2ang_center(4), 4, g, Mode.TRAINING)
        np.testing.assert_allclose(w[0], w[3])
        np.testing.assert_allclose(w[1], w[2])

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0, np.pi), st.floats(0, 2 * np.pi), st.sampled_from([1, 2, 8, 32]))
    def test_convex(self, theta, phi, nside):
        g = HealpixGrid(nside)
        p = g.ang2pix(theta, phi)
        w = interp_weights(SphereCoord(theta, phi), p, g, Mode.TRAINING)
        assert np.all(w >= 0)
        assert w.sum() == pytest.approx(1.0)


class TestQuery:
    @pytest.mark.parametrize("mode", [Mode.RUNTIME, Mode.TRAINING])
    def test_identical_corners(self, mode):
        sg, cb = random_grid()
        sg.indices[:] = 7
        d = upper_dirs(np.random.default_rng(1), 50)
        # exact up to rounding of the weight sum
        np.testing.assert_allclose(query_hemi(d, Hemisphere.NORTH, sg, cb, mode),
                                   np.broadcast_to(cb.entries[7], (50, 3)), rtol=1e-15, atol=0)

    def test_zero_codebook(self):
        sg, _ = random_grid()
        d = upper_dirs(np.random.default_rng(2), 20)
        out = query_bidir(d, d, sg, Codebook.zeros(5, 3))
        np.testing.assert_array_equal(out, np.zeros((20, 6)))

    def test_runtime_is_corner_mean(self):
        sg, cb = random_grid(nside=8)
        g = sg.grid
        rng = np.random.default_rng(3)
        d = upper_dirs(rng, 200)
        got = query_hemi(d, Hemisphere.NORTH, sg, cb)
        ids, _ = g.pixel_corners(g.ang2pix(d.theta, d.phi))
        np.testing.assert_allclose(got, cb.entries[sg.indices[ids]].mean(axis=1))
        # south half: positions follow the north block
        s = d.flip()
        got_s = query_hemi(s, Hemisphere.SOUTH, sg, cb)
        ids, _ = g.pixel_corners(g.ang2pix(s.theta, s.phi))
        pos = ids - (g.vertex_count_full - sg.n) + sg.n
        np.testing.assert_allclose(got_s, cb.entries[sg.indices[pos]].mean(axis=1))

    def test_bidir_is_concatenation(self):
        sg, cb = random_grid()
        rng = np.random.default_rng(4)
        wi, wo = upper_dirs(rng, 30), upper_dirs(rng, 30)
        for mode in Mode:
            got = query_bidir(wi, wo, sg, cb, mode)
            np.testing.assert_array_equal(got[:, :3], query_hemi(wi, Hemisphere.NORTH, sg, cb, mode))
            np.testing.assert_array_equal(got[:, 3:],
                                          query_hemi(wo.flip(), Hemisphere.SOUTH, sg, cb, mode))

    def test_outgoing_pole_hits_south_pole(self):
        sg, _ = random_grid()
        _, pos = sg.locate(SphereCoord(0.0, 0.0).flip(), Hemisphere.SOUTH)
        assert sg.size - 1 in pos

    def test_equator_answered_by_both_halves(self):
        sg, cb = random_grid()
        d = SphereCoord(np.full(5, np.pi / 2), np.linspace(0, 6, 5))
        for hemi in Hemisphere:
            assert np.all(np.isfinite(query_hemi(d, hemi, sg, cb)))

    def test_beyond_margin_rejected(self):
        sg, cb = random_grid()
        with pytest.raises(DomainError):
            query_hemi(SphereCoord(np.pi / 2 + 2 * sg.margin, 0.0), Hemisphere.NORTH, sg, cb)
        with pytest.raises(DomainError):
            query_hemi(SphereCoord(0.3, 0.0), Hemisphere.SOUTH, sg, cb)

    def test_bad_indices(self):
        with pytest.raises(ValueError):
            SphericalIndexGrid(2, 3, indices=np.full(2 * hemisphere_point_count(2), 8))
        with pytest.raises(ValueError):
            Codebook(np.zeros((3, 4)))


class TestSoftLookup:
    def test_large_margin_matches_hard(self):
        rng = np.random.default_rng(0)
        cb = Codebook(rng.normal(size=(16, 4)))
        logits = np.zeros(16)
        logits[5] = 20.0
        np.testing.assert_allclose(soft_lookup(logits, cb, 0.5), cb.entries[5], atol=1e-3)

    def test_uniform_row_gives_mean(self):
        cb = Codebook(np.random.default_rng(1).normal(size=(8, 3)))
        np.testing.assert_allclose(soft_lookup(np.zeros(8), cb, 0.7), cb.entries.mean(axis=0))

    def test_two_entry_temperatures(self):
        e = np.e
        np.testing.assert_allclose(softmax(np.array([1.0, 0.0]), 1.0), [e / (e + 1), 1 / (e + 1)])
        np.testing.assert_allclose(softmax(np.array([1.0, 0.0]), 0.5),
                                   [e ** 2 / (e ** 2 + 1), 1 / (e ** 2 + 1)])

    def test_nonpositive_tau(self):
        with pytest.raises(ValueError):
            softmax(np.zeros(2), 0.0)

    def test_soft_logits_set_argmax(self):
        sg = SphericalIndexGrid(1, 2)
        logits = np.random.default_rng(2).normal(size=(sg.size, 4))
        sg.set_soft_logits(logits)
        np.testing.assert_array_equal(sg.indices, logits.argmax(axis=1))


class TestPrune:
    def test_dense_coverage_keeps_everything(self):
        sg, cb = random_grid(nside=2)
        g = sg.grid
        c = g.pix2ang_center(np.arange(g.pixel_count))
        up = c.theta <= np.pi / 2
        d = SphereCoord(c.theta[up], c.phi[up])
        pr = prune(sg, d, d)
        assert pr.kept_fraction == 1.0
        np.testing.assert_array_equal(query_bidir(d, d, pr, cb), query_bidir(d, d, sg, cb))

    def test_empty_cap_removes_cap_vertices(self):
        sg, _ = random_grid(nside=4)
        g = sg.grid
        rng = np.random.default_rng(5)
        # directions only in the lower part of the northern hemisphere
        cap = np.arccos(2.0 / 3.0)
        th = rng.uniform(cap + 0.2, np.pi / 2, 20000)
        d = SphereCoord(th, rng.uniform(0, 2 * np.pi, th.size))
        pr = prune(sg, d, d)
        # vertices strictly inside the polar cap (ring < nside - 1) are not incident to any hit pixel
        north_ring = g.vertex_ring(np.arange(sg.n))
        assert not pr.keep_mask[:sg.n][north_ring < 4 - 1].any()
        # a cap direction still gets a finite (possibly zero) answer
        cap_dir = SphereCoord(np.full(3, 0.1), [0.0, 2.0, 4.0])
        assert np.all(np.isfinite(query_hemi(cap_dir, Hemisphere.NORTH, pr, Codebook.zeros(5, 3))))

    def test_supervised_queries_unchanged(self):
        sg, cb = random_grid(nside=8)
        rng = np.random.default_rng(6)
        wi = upper_dirs(rng, 300, top=1.0)
        wo = upper_dirs(rng, 300, top=0.6)
        pr = prune(sg, wi, wo)
        assert pr.kept_fraction < 1.0
        for mode in Mode:
            np.testing.assert_array_equal(query_bidir(wi, wo, pr, cb, mode),
                                          query_bidir(wi, wo, sg, cb, mode))

    def test_total_over_hemisphere(self):
        sg, cb = random_grid(nside=8)
        rng = np.random.default_rng(7)
        pr = prune(sg, upper_dirs(rng, 50, top=0.4), upper_dirs(rng, 50, top=0.4))
        d = upper_dirs(rng, 5000)
        out = query_bidir(d, d, pr, cb)
        assert np.all(np.isfinite(out))

    def test_fallback_uses_kept_ancestor(self):
        sg, cb = random_grid(nside=8)
        rng = np.random.default_rng(8)
        pr = prune(sg, upper_dirs(rng, 2000, top=1.2), upper_dirs(rng, 2000, top=1.2))
        for hemi in Hemisphere:
            table = pr.corner_pos[hemi]
            used = table[table[:, 0] >= 0]
            assert pr.keep_mask[used].all()

    def test_empty_rejected(self):
        sg, _ = random_grid()
        with pytest.raises(ValueError):
            prune(sg, SphereCoord([], []), SphereCoord([], []))


class TestAccounting:
    def test_default_ratio(self):
        assert hemisphere_point_count(64) == 24961
        assert dense_parameter_count(64, 16) == 798_752
        assert packed_grid_bits(64, 16, 9) == 580_370
        assert compression_ratio(64, 16, 9) == pytest.approx(12_780_032 / 580_370)
        assert compression_ratio(64, 16, 9) == pytest.approx(22.02, abs=0.01)

    def test_monotone_in_bitwidth(self):
        r = [compression_ratio(64, 16, b) for b in (4, 9, 14)]
        assert r[0] > r[1] > r[2]
        assert compression_ratio(8, 16, 14) < 1.0
