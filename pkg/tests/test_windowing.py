import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swinlab import windowing as W
from swinlab.autodiff import Tensor


def grid_tokens(rng, grid, c=3, b=1):
    return rng.standard_normal((b,) + tuple(grid) + (c,))


def oracle_group_keys(grid, window, shift, valid):
    """Group key of every token of the padded grid, indexed by original coordinates.

    Two tokens may attend to each other iff their keys match: same shifted
    window (floor((x - s) / M) per axis, -1 for wrapped tokens) and same
    real/pad status.
    """
    keys = {}
    for x in itertools.product(*(range(g) for g in grid)):
        k = tuple((xi - si) // mi for xi, si, mi in zip(x, shift, window))
        pad = any(xi >= vi for xi, vi in zip(x, valid))
        keys[x] = k + (pad,)
    return keys


def oracle_mask(grid, window, shift, valid):
    """Per-window zero pattern built by walking the rolled grid token by token."""
    keys = oracle_group_keys(grid, window, shift, valid)
    windows = []
    for origin in itertools.product(*(range(0, g, m) for g, m in zip(grid, window))):
        toks = []
        for local in itertools.product(*(range(m) for m in window)):
            p = tuple(o + l for o, l in zip(origin, local))  # rolled-grid position
            x = tuple((pi + si) % g for pi, si, g in zip(p, shift, grid))  # original position
            toks.append(keys[x])
        windows.append([[a == b for b in toks] for a in toks])
    return np.array(windows)


class TestPadding:
    def test_multiple_unchanged(self, rng):
        x = grid_tokens(rng, (8, 8, 8))
        out, rec = W.pad_to_window_multiple(Tensor(x), 4)
        assert rec.is_identity and out.shape == x.shape

    def test_window_seven_unchanged(self, rng):
        out, rec = W.pad_to_window_multiple(Tensor(grid_tokens(rng, (7, 7, 7))), 7)
        assert rec.padded == (7, 7, 7)

    def test_pad_and_crop_back(self, rng):
        x = grid_tokens(rng, (5, 6, 7))
        out, rec = W.pad_to_window_multiple(Tensor(x), 4)
        assert out.shape[1:4] == (8, 8, 8)
        assert np.all(out.data[:, 5:] == 0) and np.all(out.data[:, :, 6:] == 0)
        assert W.crop_padding(out, rec).data.tobytes() == x.tobytes()


class TestPartition:
    def test_fig_example_count(self, rng):
        ws = W.window_partition(Tensor(grid_tokens(rng, (8, 8, 8))), 4)
        assert ws.windows.shape == (8, 64, 3) and ws.num_windows == 8

    def test_single_window_is_flattened_grid(self, rng):
        x = grid_tokens(rng, (4, 4, 4))
        ws = W.window_partition(Tensor(x), 4)
        np.testing.assert_array_equal(ws.windows.data[0], x.reshape(64, 3))

    def test_windows_hold_contiguous_blocks(self, rng):
        x = grid_tokens(rng, (4, 6, 2), b=2)
        ws = W.window_partition(Tensor(x), 2)
        origins = W.window_origins((4, 6, 2), 2)
        for b in range(2):
            for k, (i, j, l) in enumerate(origins):
                block = x[b, i : i + 2, j : j + 2, l : l + 2].reshape(8, 3)
                np.testing.assert_array_equal(ws.windows.data[b * len(origins) + k], block)

    def test_permutation_of_elements(self, rng):
        x = grid_tokens(rng, (6, 6, 6))
        ws = W.window_partition(Tensor(x), 3)
        np.testing.assert_array_equal(np.sort(ws.windows.data.ravel()), np.sort(x.ravel()))

    def test_non_multiple_rejected(self, rng):
        with pytest.raises(ValueError, match="multiple"):
            W.window_partition(Tensor(grid_tokens(rng, (5, 4, 4))), 4)


class TestReverse:
    def test_roundtrip_bit_exact(self, rng):
        x = grid_tokens(rng, (8, 8, 8), c=5, b=2)
        back = W.window_reverse(W.window_partition(Tensor(x), 4))
        assert back.data.tobytes() == x.tobytes()

    def test_permuted_windows_differ(self, rng):
        x = grid_tokens(rng, (8, 8, 8))
        ws = W.window_partition(Tensor(x), 4)
        swapped = ws.windows.data[[1, 0, 2, 3, 4, 5, 6, 7]]
        back = W.window_reverse(W.WindowSet(Tensor(swapped), ws.grid, ws.window, ws.batch))
        assert not np.array_equal(back.data, x)

    def test_single_window_is_reshape(self, rng):
        w = rng.standard_normal((1, 27, 2))
        back = W.window_reverse(W.WindowSet(Tensor(w), (3, 3, 3), (3, 3, 3), 1))
        np.testing.assert_array_equal(back.data, w.reshape(1, 3, 3, 3, 2))

    def test_provenance_mismatch(self, rng):
        ws = W.window_partition(Tensor(grid_tokens(rng, (4, 4, 4))), 2)
        with pytest.raises(ValueError, match="does not match"):
            W.window_reverse(W.WindowSet(ws.windows, (4, 4, 6), (2, 2, 2), 1))


class TestCyclicShift:
    def test_zero_shift_identity(self, rng):
        x = grid_tokens(rng, (4, 4, 4))
        assert W.cyclic_shift(Tensor(x), 0).data.tobytes() == x.tobytes()

    def test_window_seven_shift_three(self):
        assert W.effective_window((14, 14, 14), 7, shifted=True) == ((7, 7, 7), (3, 3, 3))

    def test_forward_rolls_toward_origin(self, rng):
        x = grid_tokens(rng, (4, 4, 4))
        y = W.cyclic_shift(Tensor(x), 1).data
        np.testing.assert_array_equal(y[0, 0, 0, 0], x[0, 1, 1, 1])

    def test_inverse_bit_exact(self, rng):
        x = grid_tokens(rng, (6, 5, 7), c=4)
        back = W.cyclic_shift(W.cyclic_shift(Tensor(x), (2, 1, 3)), (2, 1, 3), inverse=True)
        assert back.data.tobytes() == x.tobytes()


class TestEffectiveWindow:
    def test_thin_grid_clamps_and_disables_shift(self):
        assert W.effective_window((4, 4, 4), 7, shifted=True) == ((4, 4, 4), (0, 0, 0))

    def test_per_axis(self):
        assert W.effective_window((8, 2, 8), 4, shifted=True) == ((4, 2, 4), (2, 0, 2))


class TestShiftMask:
    def test_zero_shift_all_zero(self):
        m = W.compute_shift_mask((8, 8, 8), 4, 0)
        assert m.shape == (8, 64, 64) and not m.any()

    def test_octants(self):
        m = W.compute_shift_mask((4, 4, 4), 4, 2)[0]
        octant = np.array([(i // 2, j // 2, k // 2) for i in range(4) for j in range(4) for k in range(4)])
        same = np.all(octant[:, None] == octant[None, :], axis=-1)
        np.testing.assert_array_equal(m == 0, same)
        assert len(np.unique(m == 0, axis=0)) == 8

    def test_values(self):
        m = W.compute_shift_mask((4, 4, 4), 2, 1)
        assert set(np.unique(m).tolist()) == {0.0, -1e9}

    def test_shift_not_below_window(self):
        with pytest.raises(ValueError):
            W.compute_shift_mask((4, 4, 4), 2, 2)

    @pytest.mark.parametrize(
        "grid,m,s,valid",
        [
            ((4, 4, 4), 2, 1, (4, 4, 4)),
            ((6, 6, 6), 3, 1, (6, 6, 6)),
            ((8, 8, 8), 4, 2, (5, 6, 7)),
            ((6, 4, 6), 2, 1, (5, 3, 6)),
            ((4, 4, 4), 4, 0, (3, 4, 2)),
        ],
    )
    def test_matches_brute_force_labeling(self, grid, m, s, valid):
        mask = W.compute_shift_mask(grid, m, s, valid=valid)
        np.testing.assert_array_equal(mask == 0, oracle_mask(grid, (m,) * 3, (s,) * 3, valid))

    @settings(max_examples=30, deadline=None)
    @given(st.sampled_from([2, 3, 4]), st.data())
    def test_reflexive_and_symmetric(self, m, data):
        grid = tuple(m * data.draw(st.integers(1, 3)) for _ in range(3))
        s = data.draw(st.integers(0, m - 1))
        valid = tuple(data.draw(st.integers(1, g)) for g in grid)
        mask = W.compute_shift_mask(grid, m, s, valid=valid)
        assert np.all(np.diagonal(mask, axis1=1, axis2=2) == 0)
        np.testing.assert_array_equal(mask, mask.transpose(0, 2, 1))


class TestWindowCount:
    @settings(max_examples=200, deadline=None)
    @given(st.tuples(*[st.integers(1, 16)] * 3), st.sampled_from([2, 4, 7]))
    def test_ceil_formula(self, grid, m):
        expected = int(np.prod([int(np.ceil(g / m)) for g in grid]))
        assert W.window_count(grid, m) == expected
        x = Tensor(np.zeros((1,) + grid + (1,)))
        padded, _ = W.pad_to_window_multiple(x, m)
        assert W.window_partition(padded, m).num_windows == expected


class TestWindowConfig:
    def test_rejects_large_shift(self):
        with pytest.raises(ValueError):
            W.WindowConfig((4, 4, 4), (4, 0, 0), (8, 8, 8))

    def test_rejects_unpadded_grid(self):
        with pytest.raises(ValueError):
            W.WindowConfig((4, 4, 4), (2, 2, 2), (6, 8, 8))
