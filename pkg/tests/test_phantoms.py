import json
from dataclasses import replace

import numpy as np
import pytest

from ssmdose.container import CorruptFileError
from ssmdose.phantoms import (
    ORGANS,
    PhantomGeometryError,
    PhantomSpec,
    build_dataset,
    dataset_checksum,
    dataset_entries,
    dose_from_ptv,
    generate_phantom,
    load_sample,
    load_split,
    read_manifest,
    split_counts,
)

SEEDS = range(30)


@pytest.fixture(scope="module")
def phantoms():
    return [generate_phantom(PhantomSpec(seed=s)) for s in SEEDS]


def brute_distance(ptv: np.ndarray, y: int, x: int) -> float:
    py, px = np.nonzero(ptv)
    return float(np.min(np.hypot(py - y, px - x)))


class TestDoseLaw:
    def test_probe_at_falloff_distance(self):
        ptv = np.zeros((40, 40), bool)
        ptv[18:22, 10:14] = True
        body = np.ones((40, 40), bool)
        dose = dose_from_ptv(ptv, body, falloff=8.0)
        # 8 pixels right of the PTV's right edge (column 13)
        assert dose[20, 21] == pytest.approx(np.exp(-1.0), abs=1e-15)
        assert dose[20, 21] == pytest.approx(0.36787944117144233, abs=1e-15)

    def test_matches_brute_force_distance(self, phantoms):
        rng = np.random.default_rng(0)
        for ph in phantoms[:10]:
            for _ in range(20):
                y, x = (int(v) for v in rng.integers(0, 64, size=2))
                if not ph.body[y, x]:
                    assert ph.dose[0, y, x] == 0.0
                    continue
                expect = np.exp(-brute_distance(ph.ptv, y, x) / 8.0)
                assert ph.dose[0, y, x] == pytest.approx(expect, rel=1e-12)

    def test_ptv_and_outside(self, phantoms):
        for ph in phantoms:
            np.testing.assert_array_equal(ph.dose[0][ph.ptv], 1.0)
            np.testing.assert_array_equal(ph.dose[0][~ph.body], 0.0)
            assert ph.dose.min() >= 0.0 and ph.dose.max() <= 1.2

    def test_monotone_along_rays(self, phantoms):
        for ph in phantoms:
            cy, cx = np.argwhere(ph.ptv).mean(axis=0)
            dose = ph.dose[0]
            for ang in np.linspace(0, 2 * np.pi, 16, endpoint=False):
                prev = np.inf
                for r in np.arange(0, 64, 0.5):
                    y, x = int(round(cy + r * np.sin(ang))), int(round(cx + r * np.cos(ang)))
                    if not (0 <= y < 64 and 0 <= x < 64) or not ph.body[y, x]:
                        break
                    # half-pixel rounding of the ray can step sideways by one pixel
                    assert dose[y, x] <= prev * np.exp(1.0 / 8.0) + 1e-12
                    prev = min(prev, dose[y, x])
                # overall trend: the far end never exceeds the start
                assert prev <= 1.0


class TestMasks:
    def test_channels_and_binary(self, phantoms):
        for ph in phantoms:
            assert ph.structure.shape == (5, 64, 64) and ph.dose.shape == (1, 64, 64)
            for ch in range(1, 5):
                assert set(np.unique(ph.structure[ch])) <= {0.0, 1.0}
            assert ph.ptv.any()
            assert 0.0 <= ph.structure[0].min() and ph.structure[0].max() <= 1.0

    def test_body_contains_organs(self, phantoms):
        for ph in phantoms:
            for ch in range(1, 5):
                assert not np.any((ph.structure[ch] > 0.5) & ~ph.body)

    def test_ptv_clear_of_cord_and_at_most_one_organ(self, phantoms):
        for ph in phantoms:
            assert not np.any(ph.ptv & ph.organ("spinal_cord"))
            assert sum(bool(np.any(ph.ptv & ph.organ(o))) for o in ORGANS) <= 1

    def test_organs_present(self, phantoms):
        for ph in phantoms:
            for o in ORGANS:
                assert ph.organ(o).any()


class TestGeneration:
    def test_deterministic(self):
        a, b = generate_phantom(PhantomSpec(seed=17)), generate_phantom(PhantomSpec(seed=17))
        np.testing.assert_array_equal(a.structure, b.structure)
        np.testing.assert_array_equal(a.dose, b.dose)

    def test_seeds_differ(self):
        a, b = generate_phantom(PhantomSpec(seed=1)), generate_phantom(PhantomSpec(seed=2))
        assert not np.array_equal(a.structure, b.structure)

    def test_larger_grid(self):
        ph = generate_phantom(PhantomSpec(seed=0, H=128, W=128))
        assert ph.dose.shape == (1, 128, 128)

    def test_too_small(self):
        with pytest.raises(ValueError, match="32x32"):
            generate_phantom(PhantomSpec(H=16, W=16))

    def test_impossible_geometry_raises(self):
        # a PTV far smaller than a pixel never passes the validity check
        with pytest.raises(PhantomGeometryError, match="10 attempts"):
            generate_phantom(PhantomSpec(seed=0, ptv_axes=(0.001, 0.001)))

    def test_spec_round_trip(self):
        spec = PhantomSpec(seed=3, falloff=5.0)
        assert PhantomSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


class TestSplits:
    @pytest.mark.parametrize("total", [10, 30, 60, 300, 3000])
    def test_ratio(self, total):
        tr, va, te = split_counts(total)
        assert tr + va + te == total
        assert min(tr, va, te) >= 1
        if total >= 300:
            assert (tr, va, te) == (total * 2 // 3, total // 15, total * 4 // 15)


class TestDataset:
    def test_round_trip(self, tmp_path):
        build_dataset(tmp_path / "d", 3, 1, 2, base_seed=5)
        for i, e in enumerate(dataset_entries(tmp_path / "d")):
            ph = load_sample(tmp_path / "d", i)
            ref = generate_phantom(PhantomSpec(seed=e["seed"]))
            np.testing.assert_array_equal(ph.structure, ref.structure)
            np.testing.assert_array_equal(ph.dose, ref.dose)
            np.testing.assert_array_equal(ph.body, ref.body)

    def test_manifest(self, tmp_path):
        m = build_dataset(tmp_path / "d", 1, 2, 3, base_seed=100)
        assert m == read_manifest(tmp_path / "d")
        assert [len(m["splits"][s]) for s in ("train", "val", "test")] == [1, 2, 3]
        seeds = [e["seed"] for e in dataset_entries(tmp_path / "d")]
        assert seeds == list(range(100, 106))
        assert len(set(seeds)) == len(seeds)
        assert m["structures"] == ["ct", "ptv", "heart", "lungs", "spinal_cord"]

    def test_split_loading(self, tmp_path):
        build_dataset(tmp_path / "d", 2, 1, 1)
        assert [p.seed for p in load_split(tmp_path / "d", "train")] == [0, 1]
        assert load_sample(tmp_path / "d", 0, "test").seed == 3

    def test_byte_identical_rebuild(self, tmp_path):
        build_dataset(tmp_path / "a", 2, 1, 1, base_seed=9)
        build_dataset(tmp_path / "b", 2, 1, 1, base_seed=9)
        assert dataset_checksum(tmp_path / "a") == dataset_checksum(tmp_path / "b")
        build_dataset(tmp_path / "c", 2, 1, 1, base_seed=10)
        assert dataset_checksum(tmp_path / "a") != dataset_checksum(tmp_path / "c")

    def test_existing_needs_overwrite(self, tmp_path):
        build_dataset(tmp_path / "d", 1, 1, 1)
        with pytest.raises(FileExistsError, match="exists"):
            build_dataset(tmp_path / "d", 1, 1, 1)
        build_dataset(tmp_path / "d", 2, 1, 1, overwrite=True)
        assert len(dataset_entries(tmp_path / "d", "train")) == 2

    def test_corruption_detected(self, tmp_path):
        build_dataset(tmp_path / "d", 1, 1, 1)
        f = tmp_path / "d" / "samples" / "0001.bin"
        buf = bytearray(f.read_bytes())
        buf[-1] ^= 0xFF
        f.write_bytes(bytes(buf))
        with pytest.raises(CorruptFileError, match="checksum"):
            load_sample(tmp_path / "d", 1)
        load_sample(tmp_path / "d", 0)

    def test_out_of_range(self, tmp_path):
        build_dataset(tmp_path / "d", 1, 1, 1)
        with pytest.raises(IndexError):
            load_sample(tmp_path / "d", 3)
        with pytest.raises(IndexError):
            load_sample(tmp_path / "d", 1, "train")

    def test_bad_counts_leave_nothing(self, tmp_path):
        with pytest.raises(ValueError):
            build_dataset(tmp_path / "d", 0, 1, 1)
        assert not (tmp_path / "d").exists()

    def test_failed_build_cleans_up(self, tmp_path):
        with pytest.raises(PhantomGeometryError):
            build_dataset(tmp_path / "d", 1, 1, 1, template=replace(PhantomSpec(), ptv_axes=(0.001, 0.001)))
        assert list(tmp_path.iterdir()) == []

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="manifest"):
            read_manifest(tmp_path)
