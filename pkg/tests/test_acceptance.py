"""Acceptance suite: one PASS/FAIL line per criterion, printed even under output capture."""
import time

import numpy as np
import pytest

from swinlab import verify as V
from swinlab.autodiff import Tensor, no_grad, set_debug
from swinlab.inference import EnsembleSpec, SlidingWindowPlan, ensemble_infer, sliding_window_infer
from swinlab.model import ModelConfig, SwinUNETR, count_parameters
from swinlab.training import TrainConfig, load_model, make_toy_dataset, save_checkpoint, train

SUMMARY = []


@pytest.fixture(scope="module", autouse=True)
def print_summary(request):
    yield
    capman = request.config.pluginmanager.getplugin("capturemanager")
    with capman.global_and_fixture_disabled():
        print("\n=== acceptance summary ===")
        for line in SUMMARY:
            print(line)


@pytest.fixture
def report(request):
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def emit(number: int, title: str, checks: list):
        ok = all(c.passed for c in checks)
        line = f"CRITERION {number:2d} {'PASS' if ok else 'FAIL'}: {title}"
        SUMMARY.append(line)
        with capman.global_and_fixture_disabled():
            print("\n" + line)
            for c in checks:
                print("    " + c.line())
        return ok

    return emit


def test_criterion_01_parameter_count(report):
    model = SwinUNETR(ModelConfig(), init_mode="zeros")
    n = model.num_parameters()
    rel = abs(n - 61.98e6) / 61.98e6
    checks = [
        V.CheckResult("relative deviation from 61.98M", rel, 0.01, rel <= 0.01, f"{n:,} parameters"),
        V.CheckResult("analytic count equals instantiated", abs(n - count_parameters(ModelConfig())), 0.0,
                      n == count_parameters(ModelConfig())),
    ]
    assert report(1, "default configuration parameter count within 1% of 61.98M", checks)


@pytest.mark.slow
def test_criterion_02_shape_contract(report):
    set_debug(False)
    checks = []
    model = SwinUNETR(ModelConfig())
    x = np.random.default_rng(0).standard_normal((1, 4, 128, 128, 128)).astype(np.float32)
    t0 = time.perf_counter()
    with no_grad():
        stages = model.encoder_forward(Tensor(x))
        shapes = stages.shapes[1:]
        # the decoder empties the level list as it goes, keeping peak memory down
        logits = model.decoder(stages.levels)
        del stages
    seconds = time.perf_counter() - t0
    expected = [(48, 64, 64, 64), (96, 32, 32, 32), (192, 16, 16, 16), (384, 8, 8, 8), (768, 4, 4, 4)]
    checks.append(V.CheckResult("encoder level shapes", 0.0 if shapes == expected else 1.0, 0.5,
                                shapes == expected, str(shapes)))
    out_ok = logits.shape == (1, 3, 128, 128, 128)
    checks.append(V.CheckResult("logit shape 3x128^3", 0.0 if out_ok else 1.0, 0.5, out_ok, str(logits.shape)))
    checks.append(V.CheckResult("default forward seconds", seconds, 120.0, seconds < 120.0))
    del logits, model

    tiny = SwinUNETR(ModelConfig.tiny())
    xt = np.random.default_rng(1).standard_normal((1, 4, 32, 32, 32)).astype(np.float32)
    t0 = time.perf_counter()
    yt = tiny.predict_logits(xt)
    st = time.perf_counter() - t0
    checks.append(V.CheckResult("tiny forward seconds", st, 5.0, st < 5.0 and yt.shape == (1, 3, 32, 32, 32)))
    assert report(2, "shape contract at 4x128^3 and forward runtime bounds", checks)


def test_criterion_03_window_attention_oracle(report):
    assert report(3, "W-MSA equals dense self-attention on one-window grids (20 draws each)",
                  V.oracle_window_attention(draws=20))


def test_criterion_04_shifted_window_oracle(report):
    assert report(4, "SW-MSA equals explicit region-gather attention, including padded grids",
                  V.oracle_shifted_window())


def test_criterion_05_gradient_suite(report):
    t0 = time.perf_counter()
    checks = V.gradcheck_ops() + V.gradcheck_model()
    seconds = time.perf_counter() - t0
    checks.append(V.CheckResult("suite seconds", seconds, 600.0, seconds < 600.0))
    assert report(5, "finite-difference checks per operation and end to end", checks)


def test_criterion_06_dice_loss_hand_values(report):
    assert report(6, "soft Dice loss hand values", V.oracle_dice_loss())


def test_criterion_07_roundtrips(report, tmp_path):
    assert report(7, "bit-exact roundtrips", V.roundtrip_checks(tmpdir=tmp_path))


def test_criterion_08_sliding_window(report):
    assert report(8, "sliding-window identities and tile plan", V.oracle_sliding_window())


def test_criterion_09_ensemble_identity(report, tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / "member.sckpt"
    save_checkpoint(path, SwinUNETR(ModelConfig.tiny(seed=2)))
    x = rng.standard_normal((4, 32, 32, 32)).astype(np.float32)
    plan = SlidingWindowPlan((32, 32, 32), 0.7)
    single = sliding_window_infer(x, load_model(path), plan)
    worst = 0.0
    for n in (2, 10):
        worst = max(worst, float(np.max(np.abs(ensemble_infer(x, EnsembleSpec([path] * n), plan) - single))))
    checks = [V.CheckResult("N copies of one checkpoint vs single model", worst, 0.0, worst == 0.0, "N = 2, 10")]
    checks += [c for c in V.oracle_ensemble() if c.name.startswith("two-constant")]
    assert report(9, "ensemble identities", checks)


def test_criterion_10_schedule(report):
    assert report(10, "warmup plus cosine schedule values", V.oracle_schedule())


@pytest.mark.slow
def test_criterion_11_toy_training(report, tmp_path):
    set_debug(False)
    manifest = make_toy_dataset(tmp_path / "data", n_cases=2, shape=(48, 48, 48), seed=0)
    config = TrainConfig.toy(total_epochs=100, val_every=10)
    t0 = time.perf_counter()
    a = train(manifest, None, config, tmp_path / "a", model_config=ModelConfig.tiny())
    seconds = time.perf_counter() - t0
    train(manifest, None, config, tmp_path / "b", model_config=ModelConfig.tiny())
    dice = a.history[-1]["val_dice"]
    checks = [V.CheckResult(f"training Dice {name}", dice[name], 0.9, dice[name] >= 0.9, f"after {a.steps} steps")
              for name in ("ET", "WT", "TC")]
    same = (tmp_path / "a" / "last.sckpt").read_bytes() == (tmp_path / "b" / "last.sckpt").read_bytes() and \
        (tmp_path / "a" / "metrics.jsonl").read_text() == (tmp_path / "b" / "metrics.jsonl").read_text()
    checks.append(V.CheckResult("repeat run bit-identical", 0.0 if same else 1.0, 0.5, same))
    checks.append(V.CheckResult("run seconds", seconds, 1800.0, seconds < 1800.0))
    assert a.steps == 200
    assert report(11, "toy nested-ellipsoid run reaches Dice >= 0.90 in 200 steps", checks)


def test_criterion_12_metric_oracle(report):
    assert report(12, "Hausdorff equals exhaustive pairs; Dice matches hand counts", V.oracle_metrics())
