import numpy as np
import pytest

from hiercva import rng
from hiercva.rng import RandomStream, create_stream, sample_exponentials, sample_normals, split


class TestCreateStream:
    def test_same_seed_same_output(self):
        a = create_stream(42).uniforms(1000)
        b = create_stream(42).uniforms(1000)
        assert a.tobytes() == b.tobytes()

    def test_distinct_seeds_differ(self):
        a = create_stream(42).uniforms(10_000)
        b = create_stream(43).uniforms(10_000)
        assert np.any(a != b)

    def test_zero_seed_is_valid(self):
        u = create_stream(0).uniforms(10_000)
        assert np.all((u > 0) & (u < 1))
        assert abs(u.mean() - 0.5) < 0.02

    def test_stream_advances(self):
        s = create_stream(5)
        assert np.any(s.uniforms(10) != s.uniforms(10))


class TestSplit:
    def test_purity(self):
        s = create_stream(7)
        s.uniforms(100)  # advancing the parent must not change its children
        np.testing.assert_array_equal(split(s, 1).normals(500), split(create_stream(7), 1).normals(500))

    def test_parent_still_usable(self):
        s = create_stream(7)
        first = create_stream(7).uniforms(5)
        split(s, 3)
        np.testing.assert_array_equal(s.uniforms(5), first)

    def test_children_uncorrelated(self):
        s = create_stream(11)
        a = split(s, 1).normals(100_000)
        b = split(s, 2).normals(100_000)
        assert abs(np.corrcoef(a, b)[0, 1]) < 0.01

    def test_lineage_order_matters(self):
        s = create_stream(11)
        a = split(split(s, 1), 2).uniforms(100)
        b = split(split(s, 2), 1).uniforms(100)
        assert not np.array_equal(a, b)

    def test_lineage_tags_distinct(self):
        tags = [rng.OUTER, rng.DEFAULTS, rng.TWIN, rng.NESTED, rng.TRAIN, rng.TEST, rng.BOOK, rng.QR, rng.ARD]
        assert len(set(tags)) == len(tags)


class TestSampling:
    def test_normal_moments(self):
        z = sample_normals(create_stream(3), 1_000_000)
        assert abs(z.mean()) < 0.005
        assert abs(z.var() - 1.0) < 0.01

    def test_exponential_mean(self):
        e = sample_exponentials(create_stream(4), 1_000_000)
        assert np.all(e > 0)
        assert abs(e.mean() - 1.0) < 0.003

    def test_zero_count(self):
        s = create_stream(9)
        assert sample_normals(s, 0).shape == (0,)
        assert sample_exponentials(s, 0).shape == (0,)
        np.testing.assert_array_equal(s.uniforms(10), create_stream(9).uniforms(10))

    def test_negative_count_rejected(self):
        with pytest.raises(ValueError):
            create_stream(1).uniforms(-1)

    def test_normals_are_inverse_cdf_of_uniforms(self):
        from scipy.stats import norm
        u = create_stream(8).uniforms(1000)
        np.testing.assert_allclose(create_stream(8).normals(1000), norm.ppf(u), rtol=1e-12, atol=1e-12)

    def test_integers_in_range(self):
        x = RandomStream(2).integers(3, 9, 10_000)
        assert x.min() == 3 and x.max() == 8
