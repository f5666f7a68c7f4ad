import json
import math

import numpy as np
import pytest

from swinlab.autodiff import Parameter
from swinlab.model import ModelConfig, SwinUNETR
from swinlab.training import (
    AdamW,
    CheckpointError,
    NonFiniteGradientError,
    TrainConfig,
    load_checkpoint,
    load_model,
    lr_at,
    make_toy_dataset,
    run_cross_validation,
    save_checkpoint,
    train,
)
from swinlab.volume_io import DatasetManifest, labels_to_channels, save_volume


class TestSchedule:
    T = 1000

    def test_warmup_end_is_peak(self):
        assert lr_at(50, self.T) == 0.0008

    def test_end_is_zero(self):
        assert lr_at(self.T, self.T) == 0.0

    def test_cosine_midpoint(self):
        assert abs(lr_at(50 + 475, self.T) - 0.0004) <= 1e-15

    def test_continuity_at_warmup_end(self):
        tw = 50
        # the warmup line and the cosine branch agree at T_w when extended as real functions
        left = 0.0008 * tw / tw
        right = 0.0008 * 0.5 * (1 + math.cos(0.0))
        assert abs(lr_at(tw, self.T) - left) <= 1e-12 and abs(lr_at(tw, self.T) - right) <= 1e-12
        assert abs(lr_at(tw, self.T) - lr_at(tw - 1, self.T)) <= 0.0008 / tw + 1e-12

    def test_nonnegative_and_bounded(self):
        vals = [lr_at(s, self.T) for s in range(self.T + 1)]
        assert min(vals) >= 0 and max(vals) == 0.0008

    def test_warmup_linear(self):
        assert lr_at(0, self.T) == 0.0 and abs(lr_at(25, self.T) - 0.0004) <= 1e-15

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_at(self.T + 1, self.T)

    def test_warmup_must_be_shorter(self):
        with pytest.raises(ValueError, match="warmup"):
            lr_at(0, 10, warmup_fraction=1.0)


def scalar_param(value):
    p = Parameter(np.array([value], dtype=np.float64), name="w")
    return p


class TestAdamW:
    def test_hand_step(self):
        p = scalar_param(1.0)
        p.grad = np.array([1.0])
        AdamW([p], weight_decay=0.0).step(0.1)
        # m_hat = 1, v_hat = 1 -> update lr * 1 / (1 + 1e-8)
        assert abs(p.data[0] - (1.0 - 0.1 / (1.0 + 1e-8))) <= 1e-15

    def test_zero_grad_zero_decay_identity(self, rng):
        p = Parameter(rng.standard_normal(5))
        before = p.data.copy()
        opt = AdamW([p], weight_decay=0.0)
        for _ in range(3):
            p.grad = np.zeros(5)
            opt.step(0.01)
        assert p.data.tobytes() == before.tobytes()

    def test_decay_applied_before_moments(self):
        p = scalar_param(2.0)
        p.grad = np.array([0.0])
        AdamW([p], weight_decay=0.5).step(0.1)
        assert abs(p.data[0] - 2.0 * (1 - 0.1 * 0.5)) <= 1e-15

    def test_two_steps_hand(self):
        p = scalar_param(0.0)
        opt = AdamW([p], betas=(0.9, 0.999), eps=0.0, weight_decay=0.0)
        p.grad = np.array([1.0])
        opt.step(1.0)
        p.grad = np.array([3.0])
        opt.step(1.0)
        m = (0.9 * 0.1 + 0.1 * 3.0) / (1 - 0.9**2)
        v = (0.999 * 0.001 + 0.001 * 9.0) / (1 - 0.999**2)
        assert abs(p.data[0] - (-1.0 - m / math.sqrt(v))) <= 1e-12

    def test_non_finite_gradient_names_parameter(self):
        p = scalar_param(1.0)
        p.grad = np.array([np.nan])
        with pytest.raises(NonFiniteGradientError, match="w"):
            AdamW([p]).step(0.1)

    def test_missing_grad_is_skipped(self):
        p = scalar_param(1.0)
        AdamW([p], weight_decay=0.0).step(0.1)
        assert p.data[0] == 1.0


class TestCheckpoint:
    def test_roundtrip_bit_exact_forward(self, rng, tmp_path):
        m = SwinUNETR(ModelConfig.tiny(seed=3))
        save_checkpoint(tmp_path / "a.sckpt", m, step=7)
        m2 = load_model(tmp_path / "a.sckpt")
        x = rng.standard_normal((1, 4, 32, 32, 32)).astype(np.float32)
        assert m.predict_logits(x).tobytes() == m2.predict_logits(x).tobytes()
        for (n1, p1), (n2, p2) in zip(m.named_parameters(), m2.named_parameters()):
            assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()

    def test_header_layout(self, tmp_path):
        m = SwinUNETR(ModelConfig.tiny())
        opt = AdamW(m.parameters())
        save_checkpoint(tmp_path / "a.sckpt", m, optimizer=opt, step=3, train_config=TrainConfig.toy())
        raw = (tmp_path / "a.sckpt").read_bytes()
        n = int.from_bytes(raw[:4], "little")
        header = json.loads(raw[4 : 4 + n])
        assert header["magic"] == "SCKPT" and header["version"] == 1 and header["step"] == 3
        assert header["model_config"]["embed_dim"] == 6
        first = header["tensors"][0]
        assert first["offset"] == 0 and first["dtype"] == "<f4"
        assert sum(t["nbytes"] for t in header["tensors"]) == len(raw) - 4 - n

    def test_optimizer_state_roundtrip(self, tmp_path, rng):
        m = SwinUNETR(ModelConfig.tiny())
        opt = AdamW(m.parameters())
        for p in m.parameters():
            p.grad = rng.standard_normal(p.shape).astype(p.dtype)
        opt.step(1e-3)
        save_checkpoint(tmp_path / "a.sckpt", m, optimizer=opt, step=1)
        ck = load_checkpoint(tmp_path / "a.sckpt")
        opt2 = AdamW(ck.model.parameters())
        opt2.load_state(ck.optimizer_state)
        assert opt2.t == 1
        for a, b in zip(opt.m, opt2.m):
            assert a.tobytes() == b.tobytes()

    def test_corrupt_file(self, tmp_path):
        (tmp_path / "bad.sckpt").write_bytes(b"\x05\x00\x00\x00{nope")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "bad.sckpt")

    def test_truncated_payload(self, tmp_path):
        m = SwinUNETR(ModelConfig.tiny())
        save_checkpoint(tmp_path / "a.sckpt", m)
        raw = (tmp_path / "a.sckpt").read_bytes()
        (tmp_path / "b.sckpt").write_bytes(raw[:-8])
        with pytest.raises(CheckpointError, match="payload"):
            load_checkpoint(tmp_path / "b.sckpt")


class TestToyDataset:
    def test_nested_masks_and_manifest(self, tmp_path):
        manifest = make_toy_dataset(tmp_path, n_cases=3, shape=(24, 24, 24), seed=1)
        assert len(manifest.ids) == 3
        loaded = DatasetManifest.load(tmp_path / "manifest.json")
        case = loaded.load_case(loaded.ids[0])
        assert case.image.shape == (24, 24, 24) and case.image.channels == 4
        et, wt, tc = labels_to_channels(case.mask.data).astype(bool)
        assert et.any() and (tc & ~et).any() and (wt & ~tc).any()

    def test_seeded(self, tmp_path):
        make_toy_dataset(tmp_path / "a", n_cases=2, shape=(16, 16, 16), seed=4)
        make_toy_dataset(tmp_path / "b", n_cases=2, shape=(16, 16, 16), seed=4)
        for name in ("case000_image.svol", "case001_mask.svol"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def quick_config(**kw):
    base = dict(total_epochs=4, crop_size=(32, 32, 32), val_roi=(32, 32, 32), val_overlap=0.0)
    base.update(kw)
    return TrainConfig.toy(**base)


@pytest.fixture(scope="module")
def toy_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    return make_toy_dataset(root, n_cases=2, shape=(32, 32, 32), seed=0, k=2)


class TestTrain:
    def test_artifacts_and_log(self, toy_manifest, tmp_path):
        result = train(toy_manifest, None, quick_config(), tmp_path, model_config=ModelConfig.tiny())
        assert (tmp_path / "last.sckpt").exists() and (tmp_path / "best.sckpt").exists()
        lines = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
        assert [r["epoch"] for r in lines] == [0, 1, 2, 3]
        assert set(lines[-1]["val_dice"]) == {"ET", "WT", "TC"}
        assert {"mean_train_loss", "lr"} <= set(lines[0])
        assert result.steps == 8

    def test_deterministic(self, toy_manifest, tmp_path):
        cfg = quick_config(total_epochs=2)
        train(toy_manifest, None, cfg, tmp_path / "a", model_config=ModelConfig.tiny())
        train(toy_manifest, None, cfg, tmp_path / "b", model_config=ModelConfig.tiny())
        assert (tmp_path / "a" / "last.sckpt").read_bytes() == (tmp_path / "b" / "last.sckpt").read_bytes()
        assert (tmp_path / "a" / "metrics.jsonl").read_text() == (tmp_path / "b" / "metrics.jsonl").read_text()

    def test_resume_bit_exact(self, toy_manifest, tmp_path):
        cfg = quick_config(total_epochs=3)
        train(toy_manifest, None, cfg, tmp_path / "full", model_config=ModelConfig.tiny())
        train(toy_manifest, None, cfg, tmp_path / "part", model_config=ModelConfig.tiny(), stop_after_epochs=1)
        train(toy_manifest, None, cfg, tmp_path / "part", model_config=ModelConfig.tiny(),
              resume=tmp_path / "part" / "last.sckpt")
        full = load_checkpoint(tmp_path / "full" / "last.sckpt")
        part = load_checkpoint(tmp_path / "part" / "last.sckpt")
        assert full.step == part.step == 6
        for (_, a), (_, b) in zip(full.model.named_parameters(), part.model.named_parameters()):
            assert a.data.tobytes() == b.data.tobytes()
        assert (tmp_path / "full" / "metrics.jsonl").read_text() == (tmp_path / "part" / "metrics.jsonl").read_text()

    def test_fold_validation_split(self, toy_manifest, tmp_path):
        result = train(toy_manifest, 0, quick_config(total_epochs=1), tmp_path, model_config=ModelConfig.tiny())
        train_ids, val_ids = toy_manifest.fold_cases(0)
        assert result.train_ids == train_ids and result.val_ids == val_ids

    @pytest.mark.filterwarnings("ignore:invalid value encountered:RuntimeWarning")
    @pytest.mark.parametrize("debug", [True, False])
    def test_non_finite_loss_names_case_and_step(self, tmp_path, debug):
        from swinlab.autodiff import set_debug

        manifest = make_toy_dataset(tmp_path / "data", n_cases=2, shape=(32, 32, 32), seed=0)
        case = manifest.load_case(manifest.ids[0])
        case.image.data[0, 0, 0, 0] = np.inf
        save_volume(case.image, manifest.resolve(manifest.entry(manifest.ids[0]).image))
        set_debug(debug)
        with pytest.raises(FloatingPointError, match=r"case .* step \d+"):
            train(manifest, None, quick_config(total_epochs=1), tmp_path / "run", model_config=ModelConfig.tiny())


class TestCrossValidation:
    def test_two_folds_one_run(self, toy_manifest, tmp_path):
        spec = run_cross_validation(toy_manifest, quick_config(total_epochs=1), tmp_path, runs=1,
                                    model_config=ModelConfig.tiny())
        assert len(spec.paths) == 2
        meta = json.loads((tmp_path / "ensemble.json").read_text())
        assert {(m["fold"], m["seed"]) for m in meta["members"]} == {(0, 0), (1, 0)}
        assert all("best_val_dice" in m for m in meta["members"])
        for p in spec.paths:
            load_model(p)
