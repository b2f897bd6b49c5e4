"""LR schedule shape, ingestion, PAD masking, and resume determinism."""

import math
from dataclasses import replace

import numpy as np
import pytest

from remidiff import tensor as T
from remidiff.diffusion import make_schedule, vb_loss
from remidiff.midi import write_midi
from remidiff.model import MFAConfig
from remidiff.remi import RemiVocab, save_tokens_text
from remidiff.training import (
    AdamW,
    TrainConfig,
    TrainingDiverged,
    config_from_pairs,
    ingest,
    load_checkpoint,
    lr_at,
    parse_config,
    train,
)

from conftest import make_random_score

TINY_MODEL = MFAConfig(
    vocab_size=RemiVocab().size,
    model_dim=16,
    state_dim=4,
    heads=2,
    n_blocks=1,
    n_mamba_per_block=1,
    diffusion_steps=8,
)


def tiny_cfg(tmp_path, **kw):
    defaults = dict(
        data_dir=str(tmp_path / "data"),
        out_dir=str(tmp_path / "run"),
        steps=6,
        batch_size=2,
        warmup_steps=2,
        diffusion_steps=8,
        seq_len=32,
        checkpoint_every=3,
        model=TINY_MODEL,
    )
    defaults.update(kw)
    return TrainConfig(**defaults)


@pytest.fixture
def token_data(tmp_path, rng, vocab):
    data = tmp_path / "data"
    data.mkdir()
    for i in range(3):
        tokens = rng.integers(0, vocab.size - 2, size=40)
        save_tokens_text(tokens, data / f"seq{i}.txt")
    return data


class TestLrSchedule:
    def test_warmup_endpoints(self, tmp_path):
        cfg = tiny_cfg(tmp_path, steps=100, warmup_steps=10, lr=1e-3)
        assert lr_at(0, cfg) == 0.0
        assert lr_at(10, cfg) == pytest.approx(1e-3)
        assert lr_at(100, cfg) == pytest.approx(0.0, abs=1e-12)

    def test_continuous_at_junction(self, tmp_path):
        cfg = tiny_cfg(tmp_path, steps=1000, warmup_steps=100, lr=5e-4)
        left = lr_at(99, cfg)
        right = lr_at(101, cfg)
        at = lr_at(100, cfg)
        assert abs(left - at) < 1e-5 and abs(right - at) < 1e-5

    def test_piecewise_shape(self, tmp_path):
        cfg = tiny_cfg(tmp_path, steps=200, warmup_steps=50, lr=1.0)
        for step in range(50):
            assert lr_at(step, cfg) == pytest.approx(step / 50)
        for step in range(50, 200):
            expected = 0.5 * (1 + math.cos(math.pi * (step - 50) / 150))
            assert lr_at(step, cfg) == pytest.approx(expected)

    def test_constant_schedule(self, tmp_path):
        cfg = tiny_cfg(tmp_path, steps=100, warmup_steps=10, lr=2e-3, lr_schedule="constant")
        assert lr_at(50, cfg) == 2e-3

    def test_warmup_must_precede_steps(self, tmp_path):
        with pytest.raises(ValueError, match="warmup"):
            tiny_cfg(tmp_path, steps=5, warmup_steps=5)


class TestIngest:
    def test_window_splitting(self, tmp_path, vocab):
        data = tmp_path / "d"
        data.mkdir()
        save_tokens_text(np.arange(64) % 100, data / "long.txt")
        windows, manifest = ingest(data, vocab, seq_len=32)
        assert windows.shape == (2, 32)
        assert manifest == [("long.txt", 64, 2)]

    def test_short_sequence_padded(self, tmp_path, vocab):
        data = tmp_path / "d"
        data.mkdir()
        save_tokens_text(np.arange(10), data / "short.txt")
        windows, _ = ingest(data, vocab, seq_len=32)
        assert windows.shape == (1, 32)
        assert np.all(windows[0, 10:] == vocab.pad_index)

    def test_midi_files_ingested(self, tmp_path, rng, vocab):
        data = tmp_path / "d"
        data.mkdir()
        score = make_random_score(rng, n_notes=30, vocab=vocab)
        (data / "a.mid").write_bytes(write_midi(score))
        windows, manifest = ingest(data, vocab, seq_len=64, manifest_path=tmp_path / "m.csv")
        assert windows.shape[1] == 64
        assert manifest[0][0] == "a.mid"
        assert (tmp_path / "m.csv").read_text().startswith("file,tokens,windows")

    def test_unreadable_file_skipped(self, tmp_path, vocab, caplog):
        data = tmp_path / "d"
        data.mkdir()
        (data / "broken.mid").write_bytes(b"not midi at all")
        save_tokens_text(np.arange(5), data / "ok.txt")
        with caplog.at_level("WARNING"):
            windows, manifest = ingest(data, vocab, seq_len=16)
        assert len(manifest) == 1
        assert any("skipping" in rec.message for rec in caplog.records)

    def test_empty_dataset_fatal(self, tmp_path, vocab):
        data = tmp_path / "d"
        data.mkdir()
        with pytest.raises(ValueError, match="no usable"):
            ingest(data, vocab, seq_len=16)

    def test_missing_dir_fatal(self, tmp_path, vocab):
        with pytest.raises(FileNotFoundError):
            ingest(tmp_path / "absent", vocab, seq_len=16)


class TestPadMasking:
    def test_pad_positions_zero_gradient(self, rng, vocab):
        sched = make_schedule(8)
        length = 12
        x0 = rng.integers(0, 100, size=(1, length))
        x0[0, 8:] = vocab.pad_index
        xt = np.full((1, length), vocab.mask_index)
        logits = T.Tensor(rng.normal(size=(1, length, vocab.size - 1)), requires_grad=True)
        loss, _ = vb_loss(logits, x0, xt, np.array([4]), sched, pad_index=vocab.pad_index)
        loss.backward()
        assert np.all(logits.grad[0, 8:] == 0.0)
        assert np.any(logits.grad[0, :8] != 0.0)

    def test_gradient_identical_with_and_without_pad_suffix(self, rng, vocab):
        sched = make_schedule(8)
        x_real = rng.integers(0, 100, size=(1, 8))
        xt_real = np.full((1, 8), vocab.mask_index)
        logits_np = rng.normal(size=(1, 8, vocab.size - 1))

        short = T.Tensor(logits_np, requires_grad=True)
        loss_a, _ = vb_loss(short, x_real, xt_real, np.array([4]), sched, pad_index=vocab.pad_index)
        loss_a.backward()

        x_padded = np.concatenate([x_real, np.full((1, 4), vocab.pad_index)], axis=1)
        xt_padded = np.full((1, 12), vocab.mask_index)
        long = T.Tensor(
            np.concatenate([logits_np, rng.normal(size=(1, 4, vocab.size - 1))], axis=1),
            requires_grad=True,
        )
        loss_b, _ = vb_loss(long, x_padded, xt_padded, np.array([4]), sched, pad_index=vocab.pad_index)
        loss_b.backward()
        assert np.array_equal(short.grad, long.grad[:, :8])


class TestAdamW:
    def test_weight_decay_decoupled(self):
        p = T.Tensor(np.array([2.0]), requires_grad=True)
        opt = AdamW({"p": p}, weight_decay=0.5)
        p.grad = np.array([0.0])
        opt.step(lr=0.1)
        # zero gradient: only the decay term moves the weight
        assert p.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)

    def test_grad_clip_scales_global_norm(self, rng):
        a = T.Tensor(rng.normal(size=4), requires_grad=True)
        b = T.Tensor(rng.normal(size=4), requires_grad=True)
        opt = AdamW({"a": a, "b": b})
        a.grad = np.full(4, 10.0)
        b.grad = np.full(4, 10.0)
        norm = opt.clip_global_norm(1.0)
        assert norm == pytest.approx(math.sqrt(800.0))
        clipped = math.sqrt(float((a.grad**2).sum() + (b.grad**2).sum()))
        assert clipped == pytest.approx(1.0)


class TestTrainLoop:
    def test_runs_and_writes_outputs(self, tmp_path, token_data):
        cfg = tiny_cfg(tmp_path)
        ckpt, history = train(cfg)
        assert len(history) == 6
        assert ckpt.exists()
        loss_csv = (tmp_path / "run" / "loss.csv").read_text().splitlines()
        assert loss_csv[0] == "step,loss,lr"
        assert len(loss_csv) == 7
        assert (tmp_path / "run" / "manifest.csv").exists()

    def test_resume_matches_uninterrupted_run_bitwise(self, tmp_path, token_data):
        cfg = tiny_cfg(tmp_path)
        ckpt, _ = train(cfg)
        _, final_model, _, _, _ = load_checkpoint(ckpt)
        full_params = {k: p.data.copy() for k, p in final_model.params.items()}

        mid = tmp_path / "run" / "checkpoint_000003.bin"
        assert mid.exists()
        resumed_ckpt, history = train(cfg, resume=mid)
        assert [step for step, _, _ in history] == [3, 4, 5]
        _, resumed_model, _, _, _ = load_checkpoint(resumed_ckpt)
        for name, data in full_params.items():
            assert np.array_equal(data, resumed_model.params[name].data), name

    def test_divergence_aborts_and_keeps_checkpoint(self, tmp_path, token_data):
        cfg = tiny_cfg(tmp_path, lr=1e18, steps=6, warmup_steps=1, checkpoint_every=2)
        with pytest.raises(TrainingDiverged):
            train(cfg)

    def test_loss_decreases_on_tiny_memorization(self, tmp_path, rng, vocab):
        data = tmp_path / "data"
        data.mkdir()
        save_tokens_text(rng.integers(0, vocab.size - 2, size=32), data / "one.txt")
        cfg = tiny_cfg(
            tmp_path, steps=60, warmup_steps=5, lr=3e-3, batch_size=2, checkpoint_every=0
        )
        _, history = train(cfg)
        first = np.mean([l for _, l, _ in history[:5]])
        last = np.mean([l for _, l, _ in history[-5:]])
        assert last < first


class TestConfigFile:
    def test_parse_and_overrides(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text(
            "# comment\n"
            "data_dir = data\n"
            "out_dir = out\n"
            "steps = 100\n"
            "warmup_steps = 10   # inline comment\n"
            "diffusion_steps = 8\n"
            "seq_len = 32\n"
            "model.dim = 16\n"
            "model.heads = 2\n"
            "model.state = 4\n"
            "model.blocks = 1\n"
        )
        cfg = parse_config(path, overrides=["steps=50", "lr=1e-3"])
        assert cfg.steps == 50
        assert cfg.lr == 1e-3
        assert cfg.model.model_dim == 16
        assert cfg.model.diffusion_steps == 8

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("data_dir = d\nout_dir = o\nnonsense = 1\n")
        with pytest.raises(ValueError, match="unknown config key"):
            parse_config(path)

    def test_missing_required_keys(self):
        with pytest.raises(ValueError, match="missing required"):
            config_from_pairs({"steps": "10"})

    def test_bad_line_reports_location(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("data_dir = d\njust words\n")
        with pytest.raises(ValueError, match="c.cfg:2"):
            parse_config(path)

    def test_checkpoint_echoes_config(self, tmp_path, token_data):
        cfg = tiny_cfg(tmp_path, weight_decay=0.123)
        ckpt, _ = train(cfg)
        loaded_cfg, _, _, _, _ = load_checkpoint(ckpt)
        assert loaded_cfg.weight_decay == 0.123
        assert loaded_cfg.model == cfg.model
