import dataclasses
import math
import struct

import numpy as np
import pytest

from finegan.data_synth import make_dataset, make_taxonomy
from finegan.errors import ConfigError, MagicError, NumericError, TruncatedCheckpointError, VersionError
from finegan.numerics import make_rng
from finegan.trainer import (
    HISTORY_COLUMNS,
    BatchSource,
    TrainConfig,
    TrainState,
    checkpoint_bytes,
    load_checkpoint,
    parse_checkpoint,
    restore_state,
    run_epoch,
    save_checkpoint,
    train,
    train_step_d,
    train_step_g,
)


def toy(C=2, S=2, D=8, per=10, seed=0):
    tax = make_taxonomy(C, S, D, 0.3, 0.1, make_rng(seed))
    return make_dataset(tax, per, make_rng(seed + 1))


def small_cfg(**kw):
    base = dict(seed=3, epochs=4, steps_per_epoch=2, batch_size=4, z_dim=4, caption_dim=8, embed_dim=4,
                g_hidden=8, g_blocks=2, context_dim=4, d_hidden=8, contrastive_warmup_epochs=1)
    base.update(kw)
    return TrainConfig(**base)


def snapshot(net):
    return {k: v.copy() for k, v in net.params().items()}


def same_params(a, b):
    return all(a[k].tobytes() == b[k].tobytes() for k in a)


def fresh(cfg=None, ds=None):
    cfg = cfg or small_cfg()
    ds = ds or toy()
    state = TrainState(cfg, ds.dim, ds.n_labels)
    return state, BatchSource(ds, cfg.caption_dim)


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.lr_g, cfg.lr_d, cfg.lr_min) == (1e-4, 4e-4, 1e-6)
        assert cfg.contrastive_warmup_epochs == 30 and cfg.xbm_capacity == 8 * cfg.batch_size

    @pytest.mark.parametrize("kw,key", [
        (dict(lr_g=0.0), "lr_g"),
        (dict(epochs=5, contrastive_warmup_epochs=5), "contrastive_warmup_epochs"),
        (dict(batch_size=10, xbm_capacity=4), "xbm_capacity"),
        (dict(margin=1.0), "margin"),
        (dict(mode="audio"), "mode"),
    ])
    def test_invalid(self, kw, key):
        with pytest.raises(ConfigError) as exc:
            TrainConfig(**kw)
        assert exc.value.key == key

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as exc:
            TrainConfig.from_dict({"epochs": 2, "learning_rate": 0.1})
        assert exc.value.key == "learning_rate"

    def test_round_trip(self):
        cfg = small_cfg(margin=0.3)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_ablations(self):
        cfg = small_cfg()
        w = cfg.with_ablation("base").weights
        assert (w.adv, w.ce, w.cl) == (1.0, 0.0, 0.0)
        assert cfg.with_ablation("classifier").w_cl == 0.0
        assert cfg.with_ablation("contrastive").w_ce == 0.0
        assert cfg.with_ablation("full") == cfg
        with pytest.raises(ConfigError):
            cfg.with_ablation("half")


class TestSteps:
    def test_zero_lr_is_noop(self):
        state, src = fresh()
        g0, d0 = snapshot(state.G), snapshot(state.D)
        batch = src.sample(4, state.data_rng)
        bd = train_step_d(batch, state, 0.0, True)
        bg = train_step_g(batch, state, 0.0, True)
        assert same_params(snapshot(state.G), g0) and same_params(snapshot(state.D), d0)
        assert bd.adv > 0 and math.isfinite(bg.total)
        assert bd.cl > 0 and bg.cl > 0

    def test_gate_closed_reports_zero(self):
        state, src = fresh()
        batch = src.sample(4, state.data_rng)
        assert train_step_d(batch, state, 1e-3, False).cl == 0.0
        assert train_step_g(batch, state, 1e-3, False).cl == 0.0

    def test_step_deterministic(self):
        outs = []
        for _ in range(2):
            state, src = fresh()
            batch = src.sample(4, state.data_rng)
            outs.append((train_step_d(batch, state, 1e-3, True), snapshot(state.D)))
        assert outs[0][0] == outs[1][0] and same_params(outs[0][1], outs[1][1])

    def test_g_step_freezes_d_and_bank(self):
        state, src = fresh()
        batch = src.sample(4, state.data_rng)
        train_step_d(batch, state, 1e-3, True)
        d0 = snapshot(state.D)
        E0, y0 = state.bank.contents()
        g0 = snapshot(state.G)
        train_step_g(batch, state, 1e-3, True)
        E1, y1 = state.bank.contents()
        assert same_params(snapshot(state.D), d0)
        assert E0.tobytes() == E1.tobytes() and y0.tolist() == y1.tolist()
        assert not same_params(snapshot(state.G), g0)

    def test_d_step_enqueues_real_batch(self):
        state, src = fresh()
        batch = src.sample(4, state.data_rng)
        g0 = snapshot(state.G)
        train_step_d(batch, state, 1e-3, True)
        assert len(state.bank) == 4
        assert state.bank.contents()[1].tolist() == batch.labels.tolist()
        assert same_params(snapshot(state.G), g0)

    def test_non_finite_names_component(self):
        state, src = fresh()
        batch = src.sample(4, state.data_rng)
        batch.x_real[0, 0] = np.inf
        with pytest.raises(NumericError):
            train_step_d(batch, state, 1e-3, True)


class TestTrain:
    def test_epochs_zero(self, tmp_path):
        hist, ckpt = train(small_cfg(epochs=0, contrastive_warmup_epochs=0), toy(), tmp_path)
        assert hist.records == [] and ckpt.meta["iteration"] == 0
        assert (tmp_path / "history.csv").read_text().strip() == ",".join(HISTORY_COLUMNS)

    def test_counters_and_history(self):
        hist, ckpt = train(small_cfg(), toy())
        assert [r.epoch for r in hist.records] == [0, 1, 2, 3]
        assert ckpt.meta["d_updates"] == ckpt.meta["g_updates"] == 8
        assert hist.records[0].d.cl == 0.0 and hist.records[0].g.cl == 0.0
        assert all(r.d.cl > 0 for r in hist.records[1:])

    def test_lr_schedule_shape(self):
        cfg = small_cfg()
        hist, _ = train(cfg, toy())
        it, lr_d, lr_g = (np.array(c) for c in zip(*hist.lr_trace))
        assert it.tolist() == list(range(cfg.total_steps))
        assert lr_d[0] == cfg.lr_d and lr_g[0] == cfg.lr_g
        shape_d = (lr_d - cfg.lr_min) / (cfg.lr_d - cfg.lr_min)
        shape_g = (lr_g - cfg.lr_min) / (cfg.lr_g - cfg.lr_min)
        np.testing.assert_allclose(shape_d, shape_g, atol=1e-12, rtol=0)
        assert np.all(np.diff(lr_d) < 0) and np.all(lr_d > lr_g)

    def test_base_ablation_zero_columns(self):
        hist, _ = train(small_cfg().with_ablation("base"), toy())
        arr = hist.as_array()
        assert not np.any(arr[:, [2, 3, 5, 6]])

    def test_single_subclass_rejected(self):
        ds = toy(C=1, S=1)
        with pytest.raises(ConfigError):
            train(small_cfg(), ds)

    def test_bitwise_repeat(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        train(small_cfg(), toy(), a)
        train(small_cfg(), toy(), b)
        assert (a / "history.csv").read_bytes() == (b / "history.csv").read_bytes()
        assert (a / "checkpoint.fggn").read_bytes() == (b / "checkpoint.fggn").read_bytes()

    def test_resume_matches_uninterrupted(self, tmp_path):
        ds = toy(per=20)
        cfg = small_cfg(eval_every=2, eval_samples=40)
        _, full = train(cfg, ds, tmp_path / "full")
        mid = load_checkpoint(tmp_path / "full" / "checkpoint_epoch2.fggn")
        assert mid.meta["epoch"] == 2
        _, resumed = train(cfg, ds, tmp_path / "resumed", resume=mid)
        assert checkpoint_bytes(resumed) == checkpoint_bytes(full)
        assert (tmp_path / "full" / "history.csv").read_bytes() == (tmp_path / "resumed" / "history.csv").read_bytes()

    def test_eval_checkpoints(self, tmp_path):
        ds = toy(per=20)
        cfg = small_cfg(eval_every=2, eval_samples=40)
        lines = []
        hist, _ = train(cfg, ds, tmp_path, progress=lines.append)
        assert sorted(p.name for p in tmp_path.glob("checkpoint*")) == [
            "checkpoint.fggn", "checkpoint_epoch2.fggn", "checkpoint_epoch4.fggn"]
        assert math.isnan(hist.records[0].fid) and math.isfinite(hist.records[1].fid)
        assert len(lines) == 4 and lines[1].startswith("epoch=1 ld=")

    def test_partial_history_flushed(self, tmp_path, monkeypatch):
        import finegan.trainer as tr

        calls = {"n": 0}
        real = tr.train_step_g

        def flaky(batch, state, lr, gate):
            calls["n"] += 1
            if calls["n"] > 4:
                raise NumericError("boom", component="loss_g_adv")
            return real(batch, state, lr, gate)

        monkeypatch.setattr(tr, "train_step_g", flaky)
        with pytest.raises(NumericError):
            train(small_cfg(), toy(), tmp_path)
        assert len((tmp_path / "history.csv").read_text().splitlines()) == 3


class TestGate:
    def test_trajectories(self):
        """Identical to a contrastive-off run until the gate, different right after."""
        ds = toy()
        warm = 2
        runs = {}
        for enabled in (True, False):
            state, src = fresh(small_cfg(epochs=5, contrastive_warmup_epochs=warm, contrastive_enabled=enabled), ds)
            traj = []
            for _ in range(5):
                run_epoch(state, src)
                traj.append((snapshot(state.G), snapshot(state.D)))
            runs[enabled] = traj
        for e in range(warm):
            assert same_params(runs[True][e][0], runs[False][e][0])
            assert same_params(runs[True][e][1], runs[False][e][1])
        assert not same_params(runs[True][warm][1], runs[False][warm][1])


class TestCheckpoint:
    @pytest.fixture
    def ckpt(self):
        return train(small_cfg(epochs=1, contrastive_warmup_epochs=0), toy())[1]

    def test_round_trip(self, ckpt, tmp_path):
        save_checkpoint(ckpt, tmp_path / "c.fggn")
        back = load_checkpoint(tmp_path / "c.fggn")
        assert back.tensors.keys() == ckpt.tensors.keys()
        assert all(back.tensors[k].tobytes() == ckpt.tensors[k].tobytes() for k in ckpt.tensors)
        assert back.meta == ckpt.meta

    def test_networks_rebuild(self, ckpt):
        st = restore_state(ckpt)
        G = ckpt.generator()
        assert same_params(snapshot(G), snapshot(st.G))
        assert same_params(snapshot(ckpt.discriminator()), snapshot(st.D))

    def test_bad_magic(self, ckpt):
        buf = bytearray(checkpoint_bytes(ckpt))
        buf[0:4] = b"XXXX"
        with pytest.raises(MagicError):
            parse_checkpoint(bytes(buf))

    def test_version(self, ckpt):
        buf = bytearray(checkpoint_bytes(ckpt))
        buf[4:8] = struct.pack("<I", 2)
        with pytest.raises(VersionError) as exc:
            parse_checkpoint(bytes(buf))
        assert "2" in str(exc.value) and "1" in str(exc.value)

    @pytest.mark.parametrize("cut", [6, 20, 500, -3])
    def test_truncated(self, ckpt, cut):
        buf = checkpoint_bytes(ckpt)
        with pytest.raises(TruncatedCheckpointError):
            parse_checkpoint(buf[:cut])

    def test_dimension_mismatch(self, ckpt):
        with pytest.raises(ConfigError, match="dim 8.*dim 5"):
            restore_state(ckpt, toy(D=5))

    def test_counters_survive(self, ckpt):
        st = restore_state(parse_checkpoint(checkpoint_bytes(ckpt)))
        assert st.d_updates == st.g_updates == 2 and st.epoch == 1
        assert st.opt_d.step_count == 2 and len(st.bank) == 8
        assert dataclasses.asdict(st.cfg) == ckpt.meta["config"]
