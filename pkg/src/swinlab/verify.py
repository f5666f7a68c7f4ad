"""Self-verification suites: gradient checks, brute-force oracles, roundtrips.

Each suite returns a list of :class:`CheckResult`; ``run_suite`` is what the
``verify`` subcommand calls.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .autodiff import Tensor, finite_difference_check
from .autodiff import functional as F
from .model import ModelConfig, SwinUNETR


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float
    passed: bool
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name}: {self.value:.3g} vs tol {self.tolerance:g}{extra}"


def _timed(name: str, tolerance: float, fn: Callable[[], tuple], below: bool = True) -> CheckResult:
    t0 = time.perf_counter()
    value, detail = fn()
    if tolerance == 0.0:
        ok = value == 0.0  # exact checks
    else:
        ok = bool(value < tolerance) if below else bool(value >= tolerance)
    return CheckResult(name, float(value), tolerance, ok, detail, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# end-to-end gradient check


@dataclass
class ModelGradcheck:
    worst: float
    checked: int
    zero_tensors: list
    worst_zero: float
    details: list = field(default_factory=list)


def _randomize_affine(model: SwinUNETR, rng: np.random.Generator, scale: float = 0.5) -> None:
    # zero biases leave padded tokens exactly constant, which puts layer norm at
    # its curvature knee; random affine terms keep the function smooth at eps
    for name, p in model.named_parameters():
        if p.ndim == 1:
            base = 1.0 if name.endswith("weight") else 0.0
            p.data[...] = base + rng.standard_normal(p.shape) * scale


def model_gradcheck(
    dtype: str = "float64",
    input_size=(16, 16, 16),
    seed: int = 0,
    eps: float = 1e-6,
    floor: float = 1e-4,
    config: Optional[ModelConfig] = None,
) -> ModelGradcheck:
    """Finite-difference check of the full model on the tiny configuration.

    The scalar is ``sum(w * logits)`` for a fixed random ``w``. One coordinate
    per tensor is drawn among entries whose gradient exceeds ``floor`` times the
    largest gradient anywhere; smaller entries sit below the rounding noise of
    a central difference. Key-projection biases are skipped (softmax makes
    their gradient exactly zero), and tensors whose analytic gradient is
    identically zero are checked for a vanishing numeric derivative instead.

    For ``dtype="float32"`` the analytic gradient comes from a float32 model
    and the differences from a float64 copy carrying the same parameter
    values, so float32 rounding in the forward pass does not swamp the check.
    """
    cfg = config or ModelConfig.tiny(input_size=tuple(input_size))
    rng = np.random.default_rng(seed)
    ref = SwinUNETR(ModelConfig.from_dict({**cfg.to_dict(), "dtype": "float64"}))
    _randomize_affine(ref, rng)
    x = Tensor(rng.standard_normal((1, cfg.in_channels) + tuple(input_size)), requires_grad=True)
    w = Tensor(rng.standard_normal((1, cfg.out_channels) + tuple(input_size)))

    names = ["input"] + [n for n, _ in ref.named_parameters()]
    inputs = [x] + ref.parameters()

    if dtype == "float64":
        F.sum(F.mul(ref(x), w)).backward()
        grads = [t.grad for t in inputs]
    elif dtype == "float32":
        low = SwinUNETR(ModelConfig.from_dict({**cfg.to_dict(), "dtype": "float32"}))
        for (_, a), (_, b) in zip(low.named_parameters(), ref.named_parameters()):
            a.data[...] = b.data
        x32 = Tensor(x.data.astype(np.float32), requires_grad=True)
        F.sum(F.mul(low(x32), Tensor(w.data.astype(np.float32)))).backward()
        grads = [x32.grad] + [p.grad for p in low.parameters()]
    else:
        raise ValueError(f"dtype must be float32 or float64, got {dtype}")

    grads = [np.zeros(t.shape) if g is None else g.astype(np.float64) for g, t in zip(grads, inputs)]
    top = max(float(np.abs(g).max()) for g in grads)
    coords, zero_names, zero_coords = [], [], []
    for name, g in zip(names, grads):
        mag = np.abs(g).reshape(-1)
        if mag.max() == 0.0:
            zero_names.append(name)
            coords.append(np.array([], dtype=np.intp))
            zero_coords.append(np.array([0]))
            continue
        zero_coords.append(np.array([], dtype=np.intp))
        cand = np.flatnonzero(mag >= floor * top)
        if name.endswith("qkv.bias"):
            c = mag.size // 3
            cand = cand[(cand < c) | (cand >= 2 * c)]
        coords.append(rng.choice(cand, 1) if len(cand) else np.array([], dtype=np.intp))

    def f(*_):
        return F.sum(F.mul(ref(x), w))

    for t in inputs:
        t.grad = None
    worst, details = finite_difference_check(
        f, *inputs, eps=eps, coords=coords, analytic=grads, return_details=True
    )
    _, zdetails = finite_difference_check(
        f, *inputs, eps=eps, coords=zero_coords, analytic=grads, return_details=True
    )
    worst_zero = max((abs(d[3]) for d in zdetails), default=0.0) / top
    named = [(names[k], i, a, n, e) for k, i, a, n, e in details]
    return ModelGradcheck(worst, len(details), zero_names, worst_zero, named)


# ---------------------------------------------------------------------------
# per-operation gradient checks


def _away_from_zero(rng, shape, low=0.2):
    # keeps kinks and poles further than eps from every sample
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(low, 1.5, size=shape)


def _op_cases(rng: np.random.Generator) -> dict:
    """Name -> (function, list of input arrays) factories; each call draws fresh inputs."""
    from .losses import soft_dice_loss

    n = rng.standard_normal
    return {
        "add (broadcast)": lambda: (lambda a, b: F.add(a, b), [n((3, 4)), n((4,))]),
        "sub": lambda: (lambda a, b: F.sub(a, b), [n((2, 3)), n((2, 3))]),
        "mul (broadcast)": lambda: (lambda a, b: F.mul(a, b), [n((2, 3, 4)), n((3, 1))]),
        "div": lambda: (lambda a, b: F.div(a, b), [n((3, 3)), _away_from_zero(rng, (3, 3), 0.5)]),
        "scale": lambda: (lambda a: F.scale(a, -1.7), [n((5,))]),
        "square": lambda: (lambda a: F.square(a), [n((4, 2))]),
        "sigmoid": lambda: (lambda a: F.sigmoid(a), [n((3, 4)) * 3]),
        "gelu": lambda: (lambda a: F.gelu(a), [n((3, 4)) * 2]),
        "leaky_relu": lambda: (lambda a: F.leaky_relu(a), [_away_from_zero(rng, (3, 4))]),
        "sum (axis)": lambda: (lambda a: F.sum(a, axis=(0, 2), keepdims=True), [n((2, 3, 4))]),
        "mean": lambda: (lambda a: F.mean(a, axis=1), [n((2, 5, 3))]),
        "matmul (batched)": lambda: (lambda a, b: F.matmul(a, b), [n((2, 3, 4)), n((4, 5))]),
        "linear": lambda: (lambda x, w, b: F.linear(x, w, b), [n((2, 3, 4)), n((4, 5)), n((5,))]),
        "softmax": lambda: (lambda a: F.softmax(a, axis=-1), [n((3, 6)) * 2]),
        "layer_norm": lambda: (lambda x, g, b: F.layer_norm(x, g, b), [n((2, 3, 6)), n((6,)), n((6,))]),
        "instance_norm": lambda: (lambda x, g, b: F.instance_norm(x, g, b),
                                  [n((2, 3, 3, 2, 3)), n((3,)), n((3,))]),
        "conv3d (stride 1, pad 1)": lambda: (lambda x, w, b: F.conv3d(x, w, b, stride=1, padding=1),
                                             [n((1, 2, 4, 3, 4)), n((3, 2, 3, 3, 3)), n((3,))]),
        "conv3d (stride 2, k 2)": lambda: (lambda x, w: F.conv3d(x, w, stride=2, padding=0),
                                           [n((2, 2, 4, 4, 2)), n((3, 2, 2, 2, 2))]),
        "conv_transpose3d": lambda: (lambda x, w: F.conv_transpose3d(x, w, stride=2),
                                     [n((1, 3, 2, 3, 2)), n((3, 2, 2, 2, 2))]),
        "reshape": lambda: (lambda a: F.reshape(a, (4, 6)), [n((2, 3, 4))]),
        "permute": lambda: (lambda a: F.permute(a, (2, 0, 1)), [n((2, 3, 4))]),
        "concat": lambda: (lambda a, b: F.concat([a, b], axis=1), [n((2, 3)), n((2, 2))]),
        "roll": lambda: (lambda a: F.roll(a, (1, -2), (0, 2)), [n((3, 2, 4))]),
        "pad": lambda: (lambda a: F.pad(a, [(1, 0), (0, 2)]), [n((2, 3))]),
        "index (slice)": lambda: (lambda a: F.index(a, (slice(None), slice(1, 3))), [n((3, 4))]),
        "take (gather)": lambda: (lambda a: F.take(a, np.array([0, 2, 2, 1])), [n((3, 2))]),
        "soft_dice_loss": lambda: _dice_case(rng, soft_dice_loss),
    }


def _dice_case(rng, loss):
    target = (rng.random((1, 3, 2, 2, 2)) < 0.5).astype(float)
    return (lambda y: loss(y, target)), [rng.uniform(0.05, 0.95, (1, 3, 2, 2, 2))]


def _random_projection(rng):
    # reduce any output to a scalar with a fixed random weighting
    cache = {}

    def reduce(out):
        if out.shape not in cache:
            cache[out.shape] = Tensor(rng.standard_normal(out.shape))
        return F.sum(F.mul(out, cache[out.shape]))

    return reduce


def gradcheck_ops(draws: int = 3, seed: int = 0, eps: float = 1e-4, tol: float = 1e-4) -> list:
    rng = np.random.default_rng(seed)
    results = []
    for name, make in _op_cases(rng).items():
        def run(make=make):
            worst = 0.0
            for _ in range(draws):
                fn, arrays = make()
                inputs = [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in arrays]
                reduce = _random_projection(rng)
                worst = max(worst, finite_difference_check(lambda *t: reduce(fn(*t)), *inputs, eps=eps))
            return worst, f"{draws} draws, float64, eps={eps:g}"
        results.append(_timed(f"gradcheck {name}", tol, run))
    return results


def gradcheck_model(seed: int = 0) -> list:
    out = []
    for dtype, tol in (("float64", 1e-4), ("float32", 1e-2)):
        def run(dtype=dtype):
            g = model_gradcheck(dtype=dtype, seed=seed)
            return max(g.worst, g.worst_zero), f"{g.checked} coordinates, {len(g.zero_tensors)} zero-gradient tensors"
        out.append(_timed(f"gradcheck end-to-end tiny model {dtype}", tol, run))
    return out


# ---------------------------------------------------------------------------
# oracle checks


def oracle_window_attention(draws: int = 20, seed: int = 0) -> list:
    """Windowed attention on a one-window grid against dense self-attention."""
    from . import reference as R
    from . import windowing as W
    from .autodiff.nn import Init
    from .model.swin import WindowAttention

    rng = np.random.default_rng(seed)
    out = []
    for m in (2, 3, 4):
        def run(m=m):
            attn = WindowAttention(Init(0, np.float32), 8, 2, m, use_bias=False)
            worst = 0.0
            for _ in range(draws):
                R.randomize(attn, rng)
                x = rng.standard_normal((1, m**3, 8)).astype(np.float32)
                got = attn(W.WindowSet(Tensor(x), (m,) * 3, (m,) * 3, 1)).windows.data[0]
                p = (attn.qkv.weight.data, attn.qkv.bias.data, attn.proj.weight.data, attn.proj.bias.data)
                ref = R.dense_attention(x[0].astype(np.float64), *p, heads=2)
                worst = max(worst, float(np.max(np.abs(got - ref))))
            return worst, f"{draws} draws, float32"
        out.append(_timed(f"W-MSA equals dense attention M={m}", 1e-5, run))
    return out


SHIFTED_CASES = (
    ((4, 4, 4), 2), ((4, 4, 4), 4), ((6, 6, 6), 3), ((5, 6, 3), 2), ((6, 5, 6), 4), ((3, 3, 3), 2),
)


def oracle_shifted_window(seed: int = 0, shift_size: Optional[int] = None) -> list:
    """Shifted-window blocks against explicit region gathering at the intended shift ``M // 2``.

    ``shift_size`` overrides the block's shift to inject a fault; the
    ``(8, 8, 8)``, ``M=7`` case is where the intended shift is 3.
    """
    from . import reference as R
    from .autodiff.nn import Init
    from .model.swin import SwinBlock

    rng = np.random.default_rng(seed)
    cases = SHIFTED_CASES + (((8, 8, 8), 7),)
    out = []
    for grid, m in cases:
        def run(grid=grid, m=m):
            blk = SwinBlock(Init(0, np.float32), 4, 2, m, shifted=True, shift_size=shift_size)
            R.randomize(blk, rng)
            x = rng.standard_normal((1,) + grid + (4,)).astype(np.float32)
            got = blk(Tensor(x)).data
            padded = any(g % min(m, g) for g in grid)
            return float(np.max(np.abs(got - R.shifted_block(blk, x, shift=m // 2)))), \
                "padded grid" if padded else "exact grid"
        out.append(_timed(f"SW-MSA equals region gather grid={grid} M={m}", 1e-5, run))
    return out


def oracle_dice_loss() -> list:
    from .losses import soft_dice_loss

    rng = np.random.default_rng(0)
    g = (rng.random((1, 3, 4, 4, 4)) < 0.5).astype(float)
    g[:, :, 0, 0, 0], g[:, :, 0, 0, 1] = 1, 0
    same = soft_dice_loss(Tensor(g), g).item()
    disjoint = soft_dice_loss(Tensor(1 - g), g).item()
    y = np.array([0.5, 0.5]).reshape(1, 1, 2, 1, 1)
    gt = np.array([1.0, 0.0]).reshape(1, 1, 2, 1, 1)
    third = soft_dice_loss(Tensor(y), gt, eps=0.0).item()
    return [
        CheckResult("soft Dice Y=G", abs(same), 1e-5, abs(same) <= 1e-5),
        CheckResult("soft Dice disjoint", abs(disjoint - 1), 1e-5, abs(disjoint - 1) <= 1e-5),
        CheckResult("soft Dice G=[1,0] Y=[0.5,0.5]", abs(third - 1 / 3), 1e-12, abs(third - 1 / 3) <= 1e-12),
    ]


def oracle_metrics(seeds: int = 6) -> list:
    from . import reference as R
    from .metrics import dice_score, hausdorff_distance

    def hd():
        worst = 0.0
        for seed in range(seeds):
            rng = np.random.default_rng(seed)
            shape = tuple(rng.integers(2, 7, 3))
            p, g = rng.random(shape) < 0.4, rng.random(shape) < 0.3
            p.flat[0], g.flat[-1] = True, True
            sp = tuple(rng.uniform(0.5, 2.0, 3))
            for q in (100, 95):
                worst = max(worst, abs(hausdorff_distance(p, g, sp, q) - R.hausdorff(p, g, sp, q)))
        return worst, f"{seeds} mask pairs <= 6^3, percentiles 100 and 95"

    def dice():
        p = np.zeros((4, 4, 4), bool)
        g = np.zeros((4, 4, 4), bool)
        p[0, :2], g[0, 1:3] = True, True  # 8 and 8 voxels, 4 shared
        cases = [(dice_score(p, g), 0.5), (dice_score(p, p), 1.0), (dice_score(p, ~p), 0.0),
                 (dice_score(np.zeros(3, bool), np.zeros(3, bool)), 1.0)]
        return max(abs(a - b) for a, b in cases), "hand counts"

    return [_timed("Hausdorff equals exhaustive pairs", 0.0, hd),
            _timed("dice_score hand counts", 0.0, dice)]


def oracle_sliding_window() -> list:
    from scipy.special import expit

    from .inference import SlidingWindowPlan, plan_tiles, sliding_window_infer

    rng = np.random.default_rng(0)
    model = SwinUNETR(ModelConfig.tiny())
    x = rng.standard_normal((4, 32, 32, 32)).astype(np.float32)

    def single():
        direct = expit(model.predict_logits(x[None]))[0]
        got = sliding_window_infer(x, model, SlidingWindowPlan((32, 32, 32), 0.7))
        return float(np.max(np.abs(got - direct))), "one 32^3 tile"

    def constant():
        def predict(t):
            return np.full((1, 3) + t.shape[2:], np.log(0.3 / 0.7), np.float32)
        got = sliding_window_infer(rng.standard_normal((4, 21, 17, 19)).astype(np.float32), predict,
                                   SlidingWindowPlan((8, 8, 8), 0.7))
        return float(np.max(np.abs(got - np.float32(0.3)))), "roi 8, overlap 0.7"

    def origins():
        axis = sorted({o[0] for o in plan_tiles((240, 128, 128), (128, 128, 128), 0.7)})
        return (0.0 if axis == [0, 38, 76, 112] else 1.0), f"origins {axis}"

    return [_timed("single tile equals direct forward", 1e-6, single),
            _timed("constant model gives constant output", 1e-6, constant),
            _timed("tile origins for extent 240", 0.5, origins)]


def oracle_ensemble() -> list:
    from .inference import SlidingWindowPlan, ensemble_infer, sliding_window_infer

    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 32, 32, 32)).astype(np.float32)
    model = SwinUNETR(ModelConfig.tiny())
    plan = SlidingWindowPlan((32, 32, 32), 0.5)

    def duplicates():
        single = sliding_window_infer(x, model, plan)
        diff = max(float(np.max(np.abs(ensemble_infer(x, [model] * n, plan) - single))) for n in (1, 3, 10))
        return diff, "N = 1, 3, 10 copies"

    def constants():
        def const(v):
            return lambda t: np.full((1, 3) + t.shape[2:], np.log(v / (1 - v)), np.float32)
        got = ensemble_infer(x[:, :4, :4, :4], [const(0.2), const(0.6)], SlidingWindowPlan((4, 4, 4)))
        return float(np.max(np.abs(got - np.float32(0.4)))), "members 0.2 and 0.6"

    return [_timed("ensemble of duplicates equals single model", 0.0, duplicates),
            _timed("two-constant ensemble averages exactly", 0.0, constants)]


def oracle_schedule() -> list:
    from .training import lr_at

    total, tw = 1000, 50
    checks = [
        ("lr at end of warmup", abs(lr_at(tw, total) - 0.0008), 1e-15),
        ("lr at final step", abs(lr_at(total, total)), 1e-15),
        ("lr at cosine midpoint", abs(lr_at(tw + (total - tw) // 2, total) - 0.0004), 1e-15),
        # both branches evaluated at T_w: the warmup line reaches lr_max, the cosine starts there
        ("lr continuity at warmup end", abs(0.0008 * tw / tw - lr_at(tw, total)), 1e-12),
    ]
    return [CheckResult(n, v, t, v <= t) for n, v, t in checks]


# ---------------------------------------------------------------------------
# roundtrips


def roundtrip_checks(tmpdir=None) -> list:
    import tempfile
    from pathlib import Path

    from . import windowing as W
    from .training import load_model, save_checkpoint
    from .volume_io import (SegmentationMask, Volume, channels_to_labels, labels_to_channels, load_mask,
                            load_volume, save_mask, save_volume)

    rng = np.random.default_rng(0)
    out = []

    def exact(name, fn):
        t0 = time.perf_counter()
        ok, detail = fn()
        out.append(CheckResult(name, 0.0 if ok else 1.0, 0.5, ok, detail, time.perf_counter() - t0))

    x = rng.standard_normal((2, 6, 4, 8, 3)).astype(np.float32)
    exact("window partition/reverse", lambda: (
        W.window_reverse(W.window_partition(x, (2, 2, 4))).data.tobytes() == x.tobytes(), "grid 6x4x8, window 2x2x4"))
    exact("cyclic shift/unshift", lambda: (
        W.cyclic_shift(W.cyclic_shift(x, (1, 2, 3)), (1, 2, 3), inverse=True).data.tobytes() == x.tobytes(),
        "shift (1, 2, 3)"))
    labels = rng.choice(np.array([0, 1, 2, 4], np.uint8), size=(5, 6, 7))
    exact("labels to channels and back", lambda: (
        channels_to_labels(labels_to_channels(labels)).tobytes() == labels.tobytes(), "labels {0,1,2,4}"))

    with tempfile.TemporaryDirectory(dir=tmpdir) as d:
        d = Path(d)
        vol = Volume(rng.standard_normal((4, 5, 6, 7)).astype(np.float32), (1.0, 1.5, 2.0))
        save_volume(vol, d / "v.svol")
        back = load_volume(d / "v.svol")
        exact("SVOL volume save/load", lambda: (
            back.data.tobytes() == vol.data.tobytes() and back.spacing == vol.spacing, "f32 4x5x6x7"))
        mask = SegmentationMask(labels)
        save_mask(mask, d / "m.svol")
        exact("SVOL mask save/load", lambda: (load_mask(d / "m.svol").data.tobytes() == labels.tobytes(), "u8 labels"))
        model = SwinUNETR(ModelConfig.tiny(seed=5))
        save_checkpoint(d / "c.sckpt", model, step=3)
        loaded = load_model(d / "c.sckpt")
        xin = rng.standard_normal((1, 4, 32, 32, 32)).astype(np.float32)
        exact("SCKPT save/load", lambda: (
            all(a.data.tobytes() == b.data.tobytes() for a, b in zip(model.parameters(), loaded.parameters()))
            and model.predict_logits(xin).tobytes() == loaded.predict_logits(xin).tobytes(),
            "parameters and forward output"))
    return out


# ---------------------------------------------------------------------------
# suite runner

SUITES = ("gradcheck", "oracles", "roundtrip", "all")


def run_suite(name: str, shift_size: Optional[int] = None, progress: Optional[Callable] = None) -> list:
    """Run one suite (or ``all``); ``shift_size`` injects a shift into the SW-MSA oracle blocks."""
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {SUITES}")
    groups = []
    if name in ("gradcheck", "all"):
        groups += [gradcheck_ops, gradcheck_model]
    if name in ("oracles", "all"):
        groups += [oracle_window_attention, lambda: oracle_shifted_window(shift_size=shift_size),
                   oracle_dice_loss, oracle_metrics, oracle_sliding_window, oracle_ensemble, oracle_schedule]
    if name in ("roundtrip", "all"):
        groups.append(roundtrip_checks)
    results = []
    for group in groups:
        for r in group():
            results.append(r)
            if progress:
                progress(r)
    return results
