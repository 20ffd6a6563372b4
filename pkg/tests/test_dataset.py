"""Trajectory container format, bin statistics and batch sampling."""

import numpy as np
import pytest

from trajworld import dataset
from trajworld.dataset import (BinStats, DatasetError, EnvSpec,
                               TrajectoryRecord)


def make_record(rng, env_id="env", T=10, m=3, n=1):
    return TrajectoryRecord(
        env_id=env_id,
        states=rng.normal(size=(T, m)),
        actions=rng.normal(size=(T - 1, n)),
        rewards=rng.normal(size=(T - 1,)))


def make_manifest(rng, name="src", env_id="env", episodes=5, T=10, m=3, n=1):
    records = [make_record(rng, env_id, T, m, n) for _ in range(episodes)]
    return dataset.manifest_from_records(name, EnvSpec(env_id, m, n), records)


class TestRecordValidation:
    def test_counts_must_match(self, rng):
        with pytest.raises(DatasetError):
            TrajectoryRecord("e", states=np.zeros((5, 2)),
                             actions=np.zeros((3, 1)), rewards=np.zeros(4))

    def test_minimum_length(self):
        with pytest.raises(DatasetError):
            TrajectoryRecord("e", states=np.zeros((1, 2)),
                             actions=np.zeros((0, 1)), rewards=np.zeros(0))

    def test_nonfinite_rejected(self):
        states = np.zeros((4, 2))
        states[2, 1] = np.nan
        with pytest.raises(DatasetError, match="states"):
            TrajectoryRecord("e", states=states, actions=np.zeros((3, 1)),
                             rewards=np.zeros(3))

    def test_env_spec_dims(self):
        with pytest.raises(DatasetError):
            EnvSpec("e", 0, 1)
        assert EnvSpec("e", 3, 2).num_variates == 6


class TestTrajFormat:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        spec = EnvSpec("pend", 3, 1)
        records = [make_record(rng, "pend", T) for T in (5, 12, 2)]
        path = tmp_path / "pend.traj"
        dataset.write_traj(path, spec, records)
        spec2, back = dataset.read_traj(path)
        assert spec2 == spec
        assert len(back) == 3
        for a, b in zip(records, back):
            assert np.array_equal(a.states, b.states)
            assert np.array_equal(a.actions, b.actions)
            assert np.array_equal(a.rewards, b.rewards)

    def test_write_is_deterministic(self, tmp_path, rng):
        spec = EnvSpec("pend", 2, 1)
        records = [make_record(rng, "pend", 6, 2, 1)]
        p1, p2 = tmp_path / "a.traj", tmp_path / "b.traj"
        dataset.write_traj(p1, spec, records)
        dataset.write_traj(p2, spec, records)
        assert p1.read_bytes() == p2.read_bytes()

    def test_header_layout(self, tmp_path, rng):
        path = tmp_path / "x.traj"
        dataset.write_traj(path, EnvSpec("ab", 2, 1),
                           [make_record(rng, "ab", 3, 2, 1)])
        raw = path.read_bytes()
        assert raw[:4] == b"TRAJ"
        assert int.from_bytes(raw[4:8], "little") == 1
        assert int.from_bytes(raw[8:12], "little") == 2  # env_id length
        assert raw[12:14] == b"ab"

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.traj"
        path.write_bytes(b"JUNK" + b"\x00" * 20)
        with pytest.raises(DatasetError, match="magic"):
            dataset.read_traj(path)

    def test_truncated(self, tmp_path, rng):
        path = tmp_path / "t.traj"
        dataset.write_traj(path, EnvSpec("e", 2, 1),
                           [make_record(rng, "e", 5, 2, 1)])
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(DatasetError, match="truncated"):
            dataset.read_traj(path)

    def test_bad_episode_is_named(self, tmp_path, rng):
        # corrupt the second episode's rewards with NaN on disk
        spec = EnvSpec("e", 1, 1)
        recs = [make_record(rng, "e", 3, 1, 1) for _ in range(3)]
        path = tmp_path / "e.traj"
        dataset.write_traj(path, spec, recs)
        raw = bytearray(path.read_bytes())
        nan = np.float32(np.nan).tobytes()
        # header 4+4+4+1+12 = 25; ep0 = 4 + 3*4 + 2*4 + 2*4 = 32
        # ep1 rewards start at 25 + 32 + 4 + 12 + 8 = 81
        raw[81:85] = nan
        path.write_bytes(bytes(raw))
        with pytest.raises(DatasetError, match="episode 1"):
            dataset.read_traj(path)


class TestManifestIO:
    def test_write_then_ingest(self, tmp_path, rng):
        man = make_manifest(rng, episodes=4)
        dataset.compute_all_bin_stats(man, num_bins=16)
        dataset.write_manifest(man, tmp_path / "d")
        back = dataset.ingest(tmp_path / "d")
        assert back.episode_count == 4
        assert back.step_count == man.step_count
        assert "env" in back.bin_stats
        assert back.bin_stats["env"].num_bins == 16

    def test_sidecar_count_mismatch(self, tmp_path, rng):
        man = make_manifest(rng, episodes=4)
        dataset.write_manifest(man, tmp_path / "d")
        sidecar = (tmp_path / "d" / "manifest.json")
        sidecar.write_text(sidecar.read_text().replace(
            '"episode_count": 4', '"episode_count": 7'))
        with pytest.raises(DatasetError, match="counts"):
            dataset.ingest(tmp_path / "d")

    def test_ingest_missing(self, tmp_path):
        with pytest.raises(DatasetError):
            dataset.ingest(tmp_path)


class TestBinStats:
    def test_min_max(self, rng):
        states = np.array([[0.0, -5.0], [2.0, 5.0], [1.0, 0.0]])
        rec = TrajectoryRecord("e", states=states,
                               actions=np.array([[0.5], [-0.5]]),
                               rewards=np.array([1.0, 3.0]))
        man = dataset.manifest_from_records("s", EnvSpec("e", 2, 1), [rec])
        stats = dataset.compute_bin_stats(man, num_bins=8)
        assert np.allclose(stats.lo, [0.0, -5.0, 1.0, -0.5])
        assert np.allclose(stats.hi, [2.0, 5.0, 3.0, 0.5])

    def test_degenerate_variate_widened(self):
        rec = TrajectoryRecord("e", states=np.full((3, 1), 2.0),
                               actions=np.zeros((2, 1)),
                               rewards=np.ones(2))
        man = dataset.manifest_from_records("s", EnvSpec("e", 1, 1), [rec])
        stats = dataset.compute_bin_stats(man, num_bins=4)
        assert np.allclose(stats.lo, [1.5, 0.5, -0.5])
        assert np.allclose(stats.hi, [2.5, 1.5, 0.5])

    def test_json_round_trip(self, rng):
        man = make_manifest(rng)
        stats = dataset.compute_bin_stats(man, num_bins=32)
        back = BinStats.from_json(stats.to_json())
        assert np.array_equal(back.lo, stats.lo)
        assert np.array_equal(back.hi, stats.hi)
        assert back.num_bins == 32

    def test_validation(self):
        with pytest.raises(DatasetError):
            BinStats(lo=np.array([0.0]), hi=np.array([0.0]), num_bins=4)
        with pytest.raises(DatasetError):
            BinStats(lo=np.array([0.0]), hi=np.array([1.0]), num_bins=1)


# replay-source mixing weights used for multi-source pre-training
SOURCE_WEIGHTS = {"exorl": 75.0, "rlu": 5.0, "jat": 90.0, "db1": 1.0,
                  "tdmpc2": 90.0, "modular": 30.0}


class TestSampling:
    def test_choose_source_frequencies(self):
        names = sorted(SOURCE_WEIGHTS)
        total = sum(SOURCE_WEIGHTS.values())
        rng = np.random.default_rng(0)
        draws = [dataset.choose_source(names, SOURCE_WEIGHTS, rng)
                 for _ in range(100_000)]
        for name in names:
            expected = SOURCE_WEIGHTS[name] / total
            observed = draws.count(name) / len(draws)
            assert abs(observed - expected) < 0.02

    def test_choose_source_validation(self):
        rng = np.random.default_rng(0)
        with pytest.raises(DatasetError):
            dataset.choose_source(["a"], {"a": -1.0}, rng)
        with pytest.raises(DatasetError):
            dataset.choose_source(["a"], {"a": 0.0}, rng)

    def test_batch_single_env_and_shapes(self, rng):
        sources = [make_manifest(rng, name="s1", env_id="e1", m=3, n=1),
                   make_manifest(rng, name="s2", env_id="e2", m=2, n=2)]
        batch = dataset.sample_batch(sources, {"s1": 1.0, "s2": 1.0},
                                     batch_size=8, context_T=6, rng=rng)
        M = batch.env_spec.num_variates
        assert batch.values.shape == (8, 6, M)
        assert batch.mask.shape == (8, 6)
        assert batch.source in ("s1", "s2")

    def test_window_starts_cover_range_uniformly(self, rng):
        # one long episode; all valid start offsets should appear
        man = make_manifest(rng, episodes=1, T=30)
        starts = []
        for _ in range(600):
            batch = dataset.sample_batch([man], {"src": 1.0}, 1, 5, rng)
            # identify window start via the first state variate
            grid_col = np.asarray(
                [r for r in man.entries[0].records[0].states[:, 0]])
            starts.append(int(np.argmin(
                np.abs(grid_col - batch.values[0, 0, 0]))))
        counts = np.bincount(starts, minlength=26)
        assert counts.min() > 0
        # chi-square against uniform over 26 start positions
        expected = len(starts) / 26
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        assert chi2 < 60  # 25 dof, far beyond the 0.001 quantile (52.6)

    def test_short_episode_left_padded(self, rng):
        man = make_manifest(rng, episodes=1, T=4)
        batch = dataset.sample_batch([man], {"src": 1.0}, 3, 10, rng)
        assert np.all(~batch.mask[:, :6])
        assert np.all(batch.mask[:, 6:])
        assert np.all(batch.values[:, :6] == 0.0)

    def test_weight_zero_source_never_drawn(self, rng):
        sources = [make_manifest(rng, name="a", env_id="e1"),
                   make_manifest(rng, name="b", env_id="e2")]
        for _ in range(50):
            batch = dataset.sample_batch(sources, {"a": 1.0, "b": 0.0},
                                         2, 4, rng)
            assert batch.source == "a"


class TestSplit:
    def test_disjoint_and_complete(self, rng):
        man = make_manifest(rng, episodes=10)
        train, val = dataset.split_train_val(man, 0.8,
                                             np.random.default_rng(1))
        ids_train = {id(r) for r in train.all_records()}
        ids_val = {id(r) for r in val.all_records()}
        assert not ids_train & ids_val
        assert len(ids_train) == 8 and len(ids_val) == 2

    def test_deterministic(self, rng):
        man = make_manifest(rng, episodes=10)
        t1, _ = dataset.split_train_val(man, 0.7, np.random.default_rng(5))
        t2, _ = dataset.split_train_val(man, 0.7, np.random.default_rng(5))
        assert [id(r) for r in t1.all_records()] == \
            [id(r) for r in t2.all_records()]

    def test_never_empty(self, rng):
        man = make_manifest(rng, episodes=2)
        train, val = dataset.split_train_val(man, 0.99,
                                             np.random.default_rng(0))
        assert train.episode_count == 1 and val.episode_count == 1

    def test_invalid_ratio(self, rng):
        man = make_manifest(rng)
        with pytest.raises(DatasetError):
            dataset.split_train_val(man, 1.0, np.random.default_rng(0))
