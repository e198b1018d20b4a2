"""Bilevel search loop, hardware-aware loss, checkpoints, retraining."""

import numpy as np
import pytest

from nas_rt import autodiff as ad
from nas_rt import data as dio
from nas_rt import decode as dec
from nas_rt import engine, ops, space
from nas_rt.errors import ConfigError, DataError, FormatError


@pytest.fixture
def tiny_sets(tiny_cfg):
    ds = dio.gen_synthetic(8, tiny_cfg.input_shape, tiny_cfg.num_classes, seed=5)
    return dio.split_half(ds, 0)


def short_cfg(**kw):
    base = dict(total_epochs=4, warmup_epochs=2, batch_size=2, seed=0)
    base.update(kw)
    return engine.TrainConfig(**base).validate()


def _identity_arch(cfg, edges=None):
    cells = {k: dec.CellArch(k, [(0, "identity")] * cfg.nodes_per_cell)
             for k in space.CELL_KINDS}
    edges = edges or [(l, 0, 0, "nonscale") for l in range(cfg.layers)]
    return dec.ArchGraph(cfg=cfg, cells=cells, edges=edges).validate()


class TestTrainConfig:
    def test_warmup_must_precede_total(self):
        with pytest.raises(ConfigError):
            engine.TrainConfig(total_epochs=5, warmup_epochs=5).validate()

    def test_negative_lambda_rejected(self):
        with pytest.raises(ConfigError):
            engine.TrainConfig(lambda_lat=-1.0).validate()

    def test_tau_schedule_endpoints(self):
        tc = engine.TrainConfig(tau_start=5.0, tau_end=0.5).validate()
        assert tc.tau_at(0, 10) == 5.0
        assert abs(tc.tau_at(9, 10) - 0.5) < 1e-12

    def test_round_trip(self):
        tc = short_cfg(lambda_lat=3e-4, lr_arch=0.05)
        assert engine.TrainConfig.from_dict(tc.to_dict()) == tc


class TestHardwareAwareLoss:
    def test_lambda_zero_total_is_ce(self, tiny_cfg, tiny_table, tiny_sets):
        net, params = space.build_supernet(tiny_cfg, 0)
        tc = short_cfg(lambda_lat=0.0)
        x, y = next(engine._batches(tiny_sets[0], [0, 1], 2))
        total, ce, latv = engine.hardware_aware_loss(
            net, params, x, y, tiny_table, tiny_cfg, tc, 1.0,
            np.random.default_rng(0))
        assert total is ce
        assert latv.item() == 0.0

    def test_lambda_zero_step_never_reads_table(self, tiny_cfg, tiny_table,
                                                tiny_sets):
        net, params = space.build_supernet(tiny_cfg, 0)
        tc = short_cfg(lambda_lat=0.0)
        opt = engine.SGD(params.named_parameters(), tc.lr_arch)
        x, y = next(engine._batches(tiny_sets[0], [0, 1], 2))
        before = tiny_table.lookup_count
        total, _, _ = engine.hardware_aware_loss(
            net, params, x, y, tiny_table, tiny_cfg, tc, 1.0,
            np.random.default_rng(0))
        opt.zero_grad()
        ad.backward(total)
        opt.step()
        assert tiny_table.lookup_count == before

    def test_lambda_scales_latency_term_exactly(self, tiny_cfg, tiny_table,
                                                tiny_sets):
        net, params = space.build_supernet(tiny_cfg, 0)
        x, y = next(engine._batches(tiny_sets[0], [0, 1], 2))
        tc = short_cfg(lambda_lat=1e-4)
        total, ce, latv = engine.hardware_aware_loss(
            net, params, x, y, tiny_table, tiny_cfg, tc, 1.0,
            np.random.default_rng(7))
        assert total.item() - ce.item() == pytest.approx(1e-4 * latv.item(),
                                                         rel=1e-12)

    def test_saturated_prediction_has_negligible_ce(self, tiny_sets):
        x, y = next(engine._batches(tiny_sets[0], [0, 1], 2))
        big = np.zeros((2, 2) + y.shape[1:])
        np.put_along_axis(big, y[:, None], 1e6, axis=1)
        assert ops.cross_entropy(ad.Tensor(big), y).item() < 1e-6


class TestSearch:
    def test_warmup_only_run_freezes_arch_params(self, tiny_cfg, tiny_table,
                                                 tiny_sets):
        dw, da = tiny_sets
        tc = short_cfg(lambda_lat=1e-4, seed=3)
        fresh = engine.SearchState(tiny_cfg, tc)
        snapshot = {n: t.data.copy()
                    for n, t in fresh.params.named_parameters().items()}
        st = engine.search(dw, da, tiny_cfg, tc, tiny_table,
                           stop_epoch=tc.warmup_epochs)
        assert st.epoch == tc.warmup_epochs
        for n, t in st.params.named_parameters().items():
            assert np.array_equal(t.data, snapshot[n]), n
        assert all(r["phase"] == "w" for r in st.history)

    def test_arch_params_move_after_warmup(self, tiny_cfg, tiny_table,
                                           tiny_sets):
        dw, da = tiny_sets
        tc = short_cfg(lambda_lat=1e-4, seed=3)
        fresh = engine.SearchState(tiny_cfg, tc)
        snapshot = {n: t.data.copy()
                    for n, t in fresh.params.named_parameters().items()}
        st = engine.search(dw, da, tiny_cfg, tc, tiny_table)
        moved = any(not np.array_equal(t.data, snapshot[n])
                    for n, t in st.params.named_parameters().items())
        assert moved

    def test_identical_seeds_identical_histories(self, tiny_cfg, tiny_table,
                                                 tiny_sets):
        dw, da = tiny_sets
        st1 = engine.search(dw, da, tiny_cfg, short_cfg(lambda_lat=1e-4, seed=11),
                            tiny_table)
        st2 = engine.search(dw, da, tiny_cfg, short_cfg(lambda_lat=1e-4, seed=11),
                            tiny_table)
        assert st1.history == st2.history
        assert st1.final_lat == st2.final_lat
        assert st1.final_ce == st2.final_ce

    def test_empty_dataset_rejected(self, tiny_cfg, tiny_table):
        empty = dio.Dataset(samples=[], num_classes=2)
        other = dio.gen_synthetic(2, tiny_cfg.input_shape, 2, seed=0)
        with pytest.raises(DataError):
            engine.search(empty, other, tiny_cfg, short_cfg(), tiny_table)

    def test_augmented_search_is_deterministic(self, tiny_cfg, tiny_table,
                                               tiny_sets):
        dw, da = tiny_sets
        runs = [engine.search(dw, da, tiny_cfg,
                              short_cfg(augment=True, seed=4), tiny_table)
                for _ in range(2)]
        assert runs[0].history == runs[1].history

    def test_history_schema_and_step_numbering(self, tiny_cfg, tiny_table,
                                               tiny_sets):
        dw, da = tiny_sets
        st = engine.search(dw, da, tiny_cfg, short_cfg(), tiny_table)
        for row in st.history:
            assert set(row) == {"step", "phase", "ce", "lat", "total", "tau"}
        assert [r["step"] for r in st.history] == list(range(len(st.history)))
        phases = {r["phase"] for r in st.history}
        assert phases == {"w", "arch"}

    def test_loss_gradient_matches_finite_differences(self, tiny_cfg,
                                                      tiny_table, tiny_sets):
        # total loss wrt one arch parameter, frozen noise and frozen paths
        from nas_rt import latency as lat
        net, params = space.build_supernet(tiny_cfg, 0)
        tc = short_cfg(lambda_lat=1e-2)
        x, y = next(engine._batches(tiny_sets[0], [0, 1], 2))
        noise = lat.GumbelNoise(np.random.default_rng(5))
        paths = lat.top_n_longest_paths(
            space.beta_prob_map(params, tiny_cfg), tc.n_fusion,
            tiny_cfg.layers, tiny_cfg.scales).paths
        target = params.beta[(0, 0)]

        def f(t):
            params.beta[(0, 0)] = t
            try:
                total, _, _ = engine.hardware_aware_loss(
                    net, params, x, y, tiny_table, tiny_cfg, tc, 0.7, noise,
                    paths=paths)
                return total
            finally:
                params.beta[(0, 0)] = target

        assert ad.finite_diff_check(f, target, h=1e-5) < 1e-3


class TestCheckpoint:
    def test_resume_is_bit_identical(self, tiny_cfg, tiny_table, tiny_sets,
                                     tmp_path):
        dw, da = tiny_sets
        tc = short_cfg(lambda_lat=1e-4, seed=2)
        full = engine.search(dw, da, tiny_cfg, tc, tiny_table)

        half = engine.search(dw, da, tiny_cfg, short_cfg(lambda_lat=1e-4, seed=2),
                             tiny_table, stop_epoch=2)
        path = tmp_path / "halfway.bin"
        half.save(path)
        resumed = engine.SearchState.load(path)
        done = engine.search(dw, da, tiny_cfg, resumed.train_cfg, tiny_table,
                             state=resumed)
        assert done.history == full.history
        assert done.final_lat == full.final_lat
        assert done.final_ce == full.final_ce
        for n, t in done.params.named_parameters().items():
            assert np.array_equal(t.data, full.params.named_parameters()[n].data)

    def test_blob_round_trip(self, tmp_path, rng):
        arrays = {"a/w": rng.uniform(-1, 1, (3, 2)), "b": rng.uniform(-1, 1, 5)}
        path = tmp_path / "blob.bin"
        engine.save_blob(path, {"kind": "test", "epoch": 3}, arrays)
        header, loaded = engine.load_blob(path)
        assert header["epoch"] == 3
        for name, arr in arrays.items():
            assert np.array_equal(loaded[name], arr)

    def test_truncated_blob_detected(self, tmp_path, rng):
        path = tmp_path / "blob.bin"
        engine.save_blob(path, {"kind": "t"}, {"x": rng.uniform(-1, 1, 64)})
        raw = path.read_bytes()
        path.write_bytes(raw[:-16])
        with pytest.raises(FormatError):
            engine.load_blob(path)

    def test_bad_magic_reports_offset_zero(self, tmp_path):
        path = tmp_path / "x.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(FormatError) as err:
            engine.load_blob(path)
        assert err.value.offset == 0


class TestRetrain:
    def test_identity_chain_learns_threshold_task(self):
        cfg = space.SearchConfig(layers=2, scales=2, nodes_per_cell=2,
                                 base_channels=4, k_partial=2, num_classes=2,
                                 input_shape=(4, 8, 8)).validate()
        arch = _identity_arch(cfg)
        ds = dio.gen_synthetic(12, (4, 8, 8), 2, seed=4, noise=0.0)
        train, evl = dio.fold_datasets(ds, dio.kfold(ds, 3, 0), 0)
        tc = engine.TrainConfig(total_epochs=2, warmup_epochs=1, lr_w=0.2,
                                seed=0).validate()
        res = engine.retrain(arch, train, evl, tc, epochs=15, measure_reps=3)
        assert res.dice[1] > 0.99

    def test_empty_dataset_rejected(self, tiny_cfg):
        arch = _identity_arch(tiny_cfg)
        ds = dio.gen_synthetic(4, tiny_cfg.input_shape, 2, seed=0)
        empty = dio.Dataset(samples=[], num_classes=2)
        with pytest.raises(DataError):
            engine.retrain(arch, empty, ds, short_cfg())

    def test_loss_mostly_non_increasing(self):
        cfg = space.SearchConfig(layers=2, scales=2, nodes_per_cell=2,
                                 base_channels=4, k_partial=2, num_classes=2,
                                 input_shape=(4, 8, 8)).validate()
        cells = {k: dec.CellArch(k, [(0, "conv3d"), (1, "identity")])
                 for k in space.CELL_KINDS}
        arch = dec.ArchGraph(cfg=cfg, cells=cells,
                             edges=[(0, 0, 0, "nonscale"),
                                    (1, 0, 0, "nonscale")]).validate()
        ds = dio.gen_synthetic(12, (4, 8, 8), 2, seed=9)
        train, evl = dio.fold_datasets(ds, dio.kfold(ds, 3, 0), 0)
        res = engine.retrain(arch, train, evl,
                             engine.TrainConfig(total_epochs=2, warmup_epochs=1,
                                                seed=1).validate(),
                             epochs=12, measure_reps=3)
        diffs = np.diff(res.epoch_losses)
        assert (diffs <= 1e-9).mean() >= 0.9

    def test_metrics_schema(self, tiny_cfg):
        arch = _identity_arch(tiny_cfg)
        ds = dio.gen_synthetic(6, tiny_cfg.input_shape, 2, seed=2)
        train, evl = dio.fold_datasets(ds, dio.kfold(ds, 2, 0), 0)
        res = engine.retrain(arch, train, evl, short_cfg(), epochs=2,
                             measure_reps=3)
        m = res.metrics()
        assert set(m) == {"dice", "latency_ms", "throughput_fps"}
        assert set(m["dice"]) == {"per_class", "mean", "std"}
        assert m["throughput_fps"] == pytest.approx(1000.0 / m["latency_ms"])

    def test_seeded_retrain_reproducible(self, tiny_cfg):
        arch = _identity_arch(tiny_cfg)
        ds = dio.gen_synthetic(6, tiny_cfg.input_shape, 2, seed=2)
        train, evl = dio.fold_datasets(ds, dio.kfold(ds, 2, 0), 0)
        r1 = engine.retrain(arch, train, evl, short_cfg(), epochs=3,
                            measure_reps=3)
        r2 = engine.retrain(arch, train, evl, short_cfg(), epochs=3,
                            measure_reps=3)
        assert r1.epoch_losses == r2.epoch_losses
        assert r1.dice == r2.dice
