"""Tests for the synthetic dataset generators, stations and dataset files."""

import json

import numpy as np
import pytest

from src.errors import ArgumentError, ConfigError, FormatError
from src.grid import Grid, compute_stats, upsample_bilinear
from src.sampler import GaussianTaskSpec
from src.spectral import dft2
from src.storage import to_storage_precision
from src.synth import (
    MANIFEST_FILE,
    Dataset,
    TerrainTaskSpec,
    TimeAxis,
    coarsen,
    gen_gaussian_task,
    gen_stations,
    gen_terrain_task,
    read_dataset,
    write_dataset,
)
from src.utils import hash_json

from conftest import make_field, state_field

FINE = Grid(lat0=52.0, lon0=4.0, dlat=-0.05, dlon=0.05, H=16, W=16)


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    if a.manifest != b.manifest or a.observations != b.observations:
        return False
    if not np.array_equal(a.statics.data, b.statics.data) or len(a.samples) != len(b.samples):
        return False
    return all(
        s.meta() == t.meta()
        and np.array_equal(s.coarse.data, t.coarse.data)
        and np.array_equal(s.fine.data, t.fine.data)
        for s, t in zip(a.samples, b.samples)
    )


@pytest.fixture(scope="module")
def gaussian():
    return gen_gaussian_task(GaussianTaskSpec(FINE, 4, gain=1.5, offset=0.2, noise_std=0.8),
                             count=6, seed=3, test_count=2)


@pytest.fixture(scope="module")
def terrain():
    return gen_terrain_task(TerrainTaskSpec(Grid(0.0, 0.0, -0.1, 0.1, 32, 32), 4), count=4, seed=5)


class TestCoarsen:
    def test_factor_one_is_identity(self, grid8, rng):
        f = make_field(grid8, rng.standard_normal((8, 8, 2)))
        assert coarsen(f, 1) is f

    def test_block_mean(self, unit_grid):
        out = coarsen(make_field(unit_grid, np.array([[1.0, 2.0], [3.0, 6.0]])), 2)
        assert out.data.shape == (1, 1, 1)
        assert out.data[0, 0, 0] == pytest.approx(3.0)

    def test_constant_field(self, grid16):
        out = coarsen(make_field(grid16, np.full((16, 16), 2.5)), 4)
        assert np.allclose(out.data, 2.5)

    def test_indivisible(self, grid16):
        with pytest.raises(ArgumentError):
            coarsen(make_field(grid16, np.zeros((16, 16))), 3)
        with pytest.raises(ArgumentError):
            coarsen(make_field(grid16, np.zeros((16, 16))), 0)

    def test_coarsen_then_upsample_smooths(self, grid16, rng):
        f = make_field(grid16, rng.standard_normal((16, 16, 3)))
        back = upsample_bilinear(coarsen(f, 4), grid16)
        assert np.all(back.data.var(axis=(0, 1)) <= f.data.var(axis=(0, 1)))


class TestTimeAxis:
    def test_first_sample(self):
        assert TimeAxis("2024-01-01T00:00:00", (6, 12)).at(0) == ("2024-01-01T06:00:00", 6)

    def test_valid_times_are_unique(self):
        times = TimeAxis()
        assert len({times.at(i)[0] for i in range(40)}) == 40

    def test_invalid(self):
        with pytest.raises(ConfigError):
            TimeAxis(start_time="yesterday")
        with pytest.raises(ConfigError):
            TimeAxis(lead_times_h=())


class TestGaussianTask:
    def test_deterministic(self, gaussian):
        again = gen_gaussian_task(GaussianTaskSpec(FINE, 4, gain=1.5, offset=0.2, noise_std=0.8),
                                  count=6, seed=3, test_count=2)
        assert datasets_equal(gaussian, again)

    def test_seed_changes_data(self, gaussian):
        other = gen_gaussian_task(GaussianTaskSpec(FINE, 4, gain=1.5, offset=0.2, noise_std=0.8),
                                  count=6, seed=4, test_count=2)
        assert not np.array_equal(gaussian.samples[0].fine.data, other.samples[0].fine.data)

    def test_manifest(self, gaussian):
        m = gaussian.manifest
        assert m.task == "gaussian" and m.factor == 4 and m.count == 8
        assert m.coarse_grid == FINE.coarsened(4)
        assert m.splits == {"train": ["0000", "0001", "0002", "0003", "0004", "0005"], "test": ["0006", "0007"]}
        assert m.params == {"gain": 1.5, "offset": 0.2, "noise_std": 0.8}

    def test_stats_from_train_split_only(self, gaussian):
        expected = compute_stats([s.fine for s in gaussian.split("train")])
        assert gaussian.manifest.stats == expected

    def test_split_selection(self, gaussian):
        assert [s.sample_id for s in gaussian.split("test")] == ["0006", "0007"]
        with pytest.raises(ArgumentError):
            gaussian.split("val")

    def test_task_parameters_round_trip(self, gaussian):
        assert gaussian.gaussian_spec == GaussianTaskSpec(FINE, 4, 1.5, 0.2, 0.8)

    def test_flat_statics(self, gaussian):
        assert gaussian.statics.names == ("z", "lsm")
        assert np.all(gaussian.statics.channel("z") == 0.0)
        assert np.all(gaussian.statics.channel("lsm") == 1.0)

    def test_noiseless_limit(self):
        spec = GaussianTaskSpec(FINE, 4, gain=2.0, offset=-1.0, noise_std=1e-6)
        data = gen_gaussian_task(spec, count=2, seed=0)
        for s in data.samples:
            up = upsample_bilinear(s.coarse, FINE).data
            assert np.allclose(s.fine.data, spec.mean(up), atol=1e-4, rtol=0)

    def test_residual_variance(self):
        spec = GaussianTaskSpec(FINE, 4, gain=1.0, offset=0.0, noise_std=0.5)
        data = gen_gaussian_task(spec, count=1000, seed=1)
        residuals = np.stack([s.fine.data - spec.mean(upsample_bilinear(s.coarse, FINE).data)
                              for s in data.samples])
        assert np.allclose(residuals.var(axis=(0, 1, 2)), 0.25, rtol=0.1)

    def test_invalid_count(self):
        with pytest.raises(ArgumentError):
            gen_gaussian_task(GaussianTaskSpec(FINE, 4), count=0, seed=0)


class TestTerrainTask:
    def test_deterministic(self, terrain):
        again = gen_terrain_task(TerrainTaskSpec(Grid(0.0, 0.0, -0.1, 0.1, 32, 32), 4), count=4, seed=5)
        assert datasets_equal(terrain, again)

    def test_statics_ranges(self, terrain):
        lsm = terrain.statics.channel("lsm")
        assert np.all((lsm >= 0.0) & (lsm <= 1.0))
        assert np.all(np.isfinite(terrain.statics.channel("z")))
        assert terrain.statics.channel("z").max() == pytest.approx(2.0, rel=1e-6)

    def test_zero_bias_coarse_is_block_mean(self):
        spec = TerrainTaskSpec(Grid(0.0, 0.0, -0.1, 0.1, 16, 16), 4, roughness=0.0, bias=0.0)
        data = gen_terrain_task(spec, count=3, seed=2)
        for s in data.samples:
            assert np.array_equal(s.coarse.data, to_storage_precision(coarsen(s.fine, 4)).data)

    def test_fine_truth_has_more_small_scale_energy(self, terrain):
        fine_grid = terrain.manifest.fine_grid
        radius = fine_grid.H / (2 * terrain.manifest.factor)
        for s in terrain.samples:
            up = upsample_bilinear(s.coarse, fine_grid)
            t_fine = dft2(s.fine.channel("t2m")).energy_above(radius)
            t_up = dft2(up.channel("t2m")).energy_above(radius)
            assert t_fine > t_up

    def test_not_a_gaussian_dataset(self, terrain):
        with pytest.raises(ArgumentError):
            terrain.gaussian_spec

    def test_invalid_spec(self):
        with pytest.raises(ConfigError):
            TerrainTaskSpec(FINE, 4, roughness=-1.0)
        with pytest.raises(ConfigError):
            TerrainTaskSpec(FINE, 4, spectral_slope=0.0)


class TestStations:
    def test_noise_free_station_on_node(self, grid8, rng):
        truth = state_field(grid8, rng.standard_normal((8, 8, 4)))
        rows = gen_stations([("t0", truth)], 0, 0.0, seed=0, locations=[(grid8.lats[3], grid8.lons[4])])
        by_var = {o.variable: o.value for o in rows}
        assert by_var["t2m"] == pytest.approx(truth.data[3, 4, 0], abs=1e-12)
        assert by_var["msl"] == pytest.approx(truth.data[3, 4, 3], abs=1e-12)
        assert by_var["wind_speed"] == pytest.approx(np.hypot(truth.data[3, 4, 1], truth.data[3, 4, 2]))

    def test_fixed_locations_across_times(self, grid8, rng):
        truths = [(f"t{i}", state_field(grid8, rng.standard_normal((8, 8, 4)))) for i in range(3)]
        rows = gen_stations(truths, 4, 0.1, seed=9)
        assert len(rows) == 3 * 4 * 5
        locs = {(o.station_id, o.lat, o.lon) for o in rows}
        assert len(locs) == 4
        assert rows[0].station_id == "ST0001"
        assert all(grid8.contains(o.lat, o.lon) for o in rows)

    def test_same_seed_same_rows(self, grid8, rng):
        truths = [("t0", state_field(grid8, rng.standard_normal((8, 8, 4))))]
        assert gen_stations(truths, 5, 0.3, seed=1) == gen_stations(truths, 5, 0.3, seed=1)

    def test_noise_is_unbiased(self, grid8, rng):
        truth = state_field(grid8, rng.standard_normal((8, 8, 4)))
        loc = [(grid8.lats[2], grid8.lons[2])]
        clean = gen_stations([("t0", truth)], 0, 0.0, seed=0, locations=loc)
        exact = {o.variable: o.value for o in clean}
        noisy = gen_stations([(f"t{i}", truth) for i in range(2000)], 0, 1.0, seed=0, locations=loc)
        residual = np.array([o.value - exact[o.variable] for o in noisy])
        assert residual.size == 10000
        assert abs(residual.mean()) <= 3.0 * 1.0 / 100

    def test_invalid(self, grid8):
        truth = state_field(grid8, np.zeros((8, 8, 4)))
        with pytest.raises(ArgumentError):
            gen_stations([], 3, 0.0, seed=0)
        with pytest.raises(ArgumentError):
            gen_stations([("t0", truth)], 0, 0.0, seed=0)
        with pytest.raises(ArgumentError):
            gen_stations([("t0", truth)], 3, -1.0, seed=0)


class TestDatasetFiles:
    def _with_stations(self, dataset):
        truths = [(s.valid_time, s.fine) for s in dataset.split("test")]
        dataset.observations = gen_stations(truths, 3, 0.0, seed=2)
        return dataset

    def test_round_trip_is_bit_exact(self, tmp_path):
        data = self._with_stations(gen_gaussian_task(GaussianTaskSpec(FINE, 4), count=3, seed=0, test_count=1))
        write_dataset(tmp_path / "ds", data)
        assert datasets_equal(read_dataset(tmp_path / "ds"), data)

    def test_terrain_round_trip(self, tmp_path, terrain):
        write_dataset(tmp_path / "ds", terrain)
        assert datasets_equal(read_dataset(tmp_path / "ds"), terrain)

    def test_same_seed_same_bytes(self, tmp_path):
        for name in ("a", "b"):
            write_dataset(tmp_path / name, gen_gaussian_task(GaussianTaskSpec(FINE, 4), count=2, seed=7))
        assert (tmp_path / "a" / MANIFEST_FILE).read_bytes() == (tmp_path / "b" / MANIFEST_FILE).read_bytes()
        assert (tmp_path / "a" / "train" / "0001_fine.edf").read_bytes() == \
            (tmp_path / "b" / "train" / "0001_fine.edf").read_bytes()

    def test_manifest_records_hashes(self, tmp_path):
        path = write_dataset(tmp_path, gen_gaussian_task(GaussianTaskSpec(FINE, 4), count=1, seed=0))
        body = json.loads(path.read_text())
        assert set(body["files"]) == {"statics.edf", "train/0000_coarse.edf", "train/0000_fine.edf"}
        assert len(body["content_hash"]) == 64

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_dataset(tmp_path / "nothing")

    def test_tampered_pair_file(self, tmp_path):
        write_dataset(tmp_path, gen_gaussian_task(GaussianTaskSpec(FINE, 4), count=1, seed=0))
        target = tmp_path / "train" / "0000_fine.edf"
        raw = bytearray(target.read_bytes())
        raw[-1] ^= 0xFF
        target.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            read_dataset(tmp_path)

    def test_deleted_pair_file(self, tmp_path):
        write_dataset(tmp_path, gen_gaussian_task(GaussianTaskSpec(FINE, 4), count=1, seed=0))
        (tmp_path / "train" / "0000_coarse.edf").unlink()
        with pytest.raises(FormatError):
            read_dataset(tmp_path)

    def test_edited_manifest(self, tmp_path):
        path = write_dataset(tmp_path, gen_gaussian_task(GaussianTaskSpec(FINE, 4), count=1, seed=0))
        body = json.loads(path.read_text())
        body["seed"] = 99
        path.write_text(json.dumps(body))
        with pytest.raises(FormatError):
            read_dataset(tmp_path)

    @pytest.mark.parametrize("key", ["sample_id", "lead_time_h"])
    def test_sample_entry_missing_key(self, tmp_path, key):
        path = write_dataset(tmp_path, gen_gaussian_task(GaussianTaskSpec(FINE, 4), count=1, seed=0))
        body = json.loads(path.read_text())
        del body["samples"][0][key]
        body["content_hash"] = hash_json({k: v for k, v in body.items() if k != "content_hash"})
        path.write_text(json.dumps(body))
        with pytest.raises(FormatError):
            read_dataset(tmp_path)

    def test_invalid_json(self, tmp_path):
        (tmp_path / MANIFEST_FILE).write_text("{not json")
        with pytest.raises(FormatError):
            read_dataset(tmp_path)
