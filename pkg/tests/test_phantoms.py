import numpy as np
import pytest

from dexct.io import write_array
from dexct.phantoms import KINDS, PhantomSpec, generate

PROCEDURAL = [k for k in KINDS if k != "from-files"]


@pytest.mark.parametrize("kind", PROCEDURAL)
@pytest.mark.parametrize("size", [32, 64])
class TestProcedural:
    def test_binary_and_disjoint(self, kind, size):
        pair = generate(PhantomSpec(kind, size, seed=5))
        for mat in (pair.g1, pair.g2):
            assert set(np.unique(mat)) <= {0.0, 1.0}
        assert np.count_nonzero(pair.g1 * pair.g2) == 0

    def test_deterministic(self, kind, size):
        a = generate(PhantomSpec(kind, size, seed=9))
        b = generate(PhantomSpec(kind, size, seed=9))
        assert np.array_equal(a.g1, b.g1) and np.array_equal(a.g2, b.g2)

    def test_nonempty_materials(self, kind, size):
        pair = generate(PhantomSpec(kind, size, seed=1))
        assert np.count_nonzero(pair.g1) > 0
        assert np.count_nonzero(pair.g2) > 0

    def test_fits_in_inscribed_disc(self, kind, size):
        # supports must survive arbitrary rotation about the image centre
        pair = generate(PhantomSpec(kind, size, seed=2))
        rows, cols = np.nonzero(pair.g1 + pair.g2)
        centre = (size - 1) / 2.0
        radius = np.sqrt((rows - centre) ** 2 + (cols - centre) ** 2).max()
        assert radius <= 0.5 * size


class TestFractions:
    def test_hy_material2_fraction(self):
        pair = generate(PhantomSpec("hy", 128, seed=0))
        frac = np.count_nonzero(pair.g2) / 128**2
        assert 0.0 < frac < 0.5

    def test_hy_stable_under_seed(self):
        a = generate(PhantomSpec("hy", 128, seed=0))
        b = generate(PhantomSpec("hy", 128, seed=99))
        assert np.array_equal(a.g1, b.g1) and np.array_equal(a.g2, b.g2)

    @pytest.mark.parametrize("kind", ["bone", "egypt", "circuit"])
    def test_analog_fractions_in_band(self, kind):
        pair = generate(PhantomSpec(kind, 128, seed=3))
        for mat in (pair.g1, pair.g2):
            frac = np.count_nonzero(mat) / 128**2
            assert 0.03 <= frac <= 0.25, f"{kind}: fraction {frac:.3f} outside [0.03, 0.25]"


class TestFromFiles:
    def test_roundtrip(self, tmp_path):
        pair = generate(PhantomSpec("bone", 32))
        p1 = tmp_path / "m1.dexc"
        p2 = tmp_path / "m2.dexc"
        write_array(p1, pair.g1)
        write_array(p2, pair.g2)
        spec = PhantomSpec("from-files", 32, material1_path=str(p1), material2_path=str(p2))
        back = generate(spec)
        assert np.array_equal(back.g1, pair.g1)
        assert np.array_equal(back.g2, pair.g2)

    def test_rejects_overlapping_supports(self, tmp_path):
        ones = np.ones((8, 8))
        p1 = tmp_path / "m1.dexc"
        p2 = tmp_path / "m2.dexc"
        write_array(p1, ones)
        write_array(p2, ones)
        spec = PhantomSpec("from-files", 8, material1_path=str(p1), material2_path=str(p2))
        with pytest.raises(ValueError, match="disjoint"):
            generate(spec)

    def test_rejects_non_binary(self, tmp_path):
        p1 = tmp_path / "m1.dexc"
        p2 = tmp_path / "m2.dexc"
        write_array(p1, np.full((8, 8), 0.5))
        write_array(p2, np.zeros((8, 8)))
        spec = PhantomSpec("from-files", 8, material1_path=str(p1), material2_path=str(p2))
        with pytest.raises(ValueError, match="binary"):
            generate(spec)

    def test_requires_paths(self):
        with pytest.raises(ValueError):
            PhantomSpec("from-files", 8)


class TestSpecValidation:
    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            PhantomSpec("shepp-logan", 32)

    def test_too_small(self):
        with pytest.raises(ValueError):
            PhantomSpec("hy", 4)
