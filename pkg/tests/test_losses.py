import math

import numpy as np
import pytest

from bipedplan.autodiff import gradients, tensor
from bipedplan.losses import (
    LocalFrameError,
    Polyline,
    alternation,
    local_frame_map,
    u_esdf_loss,
    u_path_loss,
    u_wl_loss,
)
from gradcheck import esdf_error, impulse_field, path_loss_error, wl_error

W, L = 0.08, 0.12


def perfect_steps(m: int, parity: int, w=W, length=L):
    alpha = alternation(m, parity)
    return np.column_stack([length * np.arange(1, m + 1), w * alpha])


def straight_path(k=8, spacing=0.15):
    return np.column_stack([spacing * np.arange(k), np.zeros(k)])


def naive_wl(steps, path, parity, w=W, length=L):
    """Scalar-loop oracle: project each step onto the closest segment of the polyline."""
    prev, sw, sl = 0.0, 0.0, 0.0
    alpha = alternation(len(steps), parity)
    for k, s in enumerate(steps):
        best = None
        cum = 0.0
        for j in range(len(path) - 1):
            a, b = path[j], path[j + 1]
            d = b - a
            seg = math.hypot(*d)
            t = ((s[0] - a[0]) * d[0] + (s[1] - a[1]) * d[1]) / seg**2
            tc = min(max(t, 0.0), 1.0)
            dist = (s[0] - a[0] - tc * d[0]) ** 2 + (s[1] - a[1] - tc * d[1]) ** 2
            if best is None or dist < best[0]:
                te = t if (j == 0 and t < 0) or (j == len(path) - 2 and t > 1) else tc
                cross = (d[0] * (s[1] - a[1]) - d[1] * (s[0] - a[0])) / seg
                best = (dist, cum + te * seg, cross)
            cum += seg
        _, arc, lat = best
        sl += (arc - prev - length) ** 2
        sw += (lat - w * alpha[k]) ** 2
        prev = arc
    return sw / len(steps), sl / len(steps)


def test_row_mse_and_u_path_examples():
    phi = np.random.default_rng(0).normal(size=(8, 2))
    assert u_path_loss(phi, phi).item() == 0.0
    assert u_path_loss(phi + [0.1, 0.0], np.hstack([phi, np.zeros((8, 2))])).item() == pytest.approx(0.01)
    with pytest.raises(ValueError):
        u_path_loss(phi, phi[:7])


def test_u_path_naive_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b = rng.normal(size=(8, 2)), rng.normal(size=(8, 2))
        naive = sum((a[k, 0] - b[k, 0]) ** 2 + (a[k, 1] - b[k, 1]) ** 2 for k in range(8)) / 8
        assert abs(u_path_loss(a, b).item() - naive) < 1e-12


def test_local_frame_straight_path():
    path = straight_path()
    dl, w, arc = local_frame_map(tensor([0.24, 0.04]), path, prev_arc=0.12)
    assert dl.item() == pytest.approx(0.12) and w.item() == pytest.approx(0.04)
    _, w, _ = local_frame_map(tensor([0.24, -0.04]), path)
    assert w.item() == pytest.approx(-0.04)
    _, w, _ = local_frame_map(tensor([0.5, 0.0]), path)
    assert w.item() == 0.0


def test_local_frame_circle_oracle():
    radius = 1.0
    ang = np.linspace(0, math.pi / 2, 21)
    path = radius * np.column_stack([np.cos(ang), np.sin(ang)])
    for phi, delta in [(0.3, 0.05), (0.8, -0.04), (1.2, 0.08)]:
        p = (radius + delta) * np.array([math.cos(phi), math.sin(phi)])
        _, w, arc = local_frame_map(tensor(p), path)
        assert arc.item() == pytest.approx(radius * phi, rel=0.02)
        # counterclockwise travel: outward is to the right
        assert w.item() == pytest.approx(-delta, rel=0.02)


def test_polyline_degenerate():
    with pytest.raises(LocalFrameError):
        Polyline(np.zeros((5, 2)))
    with pytest.raises(LocalFrameError):
        Polyline(np.zeros((1, 2)))


@pytest.mark.parametrize("parity", [0, 1])
def test_perfect_alternation_is_zero(parity):
    uw, ul = u_wl_loss(perfect_steps(6, parity), straight_path(), W, L, parity)
    assert uw.item() == 0.0 and ul.item() == pytest.approx(0.0, abs=1e-30)


def test_parity_flip_gives_four_w_squared():
    uw, _ = u_wl_loss(perfect_steps(6, 0), straight_path(), W, L, 1)
    assert uw.item() == pytest.approx(4 * W**2, rel=1e-12)


def test_wl_naive_oracle():
    rng = np.random.default_rng(2)
    for _ in range(20):
        path = np.cumsum(rng.normal([0.15, 0.0], 0.05, size=(8, 2)), axis=0)
        steps = path[0] + np.cumsum(rng.normal([0.12, 0.0], 0.05, size=(6, 2)), axis=0) + rng.normal(0, 0.08, (6, 2))
        parity = int(rng.integers(2))
        uw, ul = u_wl_loss(steps, path, W, L, parity)
        nw, nl = naive_wl(steps, path, parity)
        assert abs(uw.item() - nw) < 1e-12 and abs(ul.item() - nl) < 1e-12


def test_wl_gradients_match_finite_differences():
    assert max(wl_error(seed) for seed in range(30)) < 1e-5


def test_u_path_gradient_matches_finite_differences():
    assert max(path_loss_error(seed) for seed in range(30)) < 1e-5


def test_esdf_examples():
    f = impulse_field()
    zero = u_esdf_loss(np.array([[0.2, 0.2], [1.8, 0.3]]), f)
    assert zero.item() == 0.0
    st = tensor([[0.2, 0.2]], requires_grad=True)
    (g,) = gradients(u_esdf_loss(st, f), [st])
    assert np.all(g == 0.0)
    peak = u_esdf_loss(np.array([[20.5 * 0.05, 20.5 * 0.05]]), f)
    assert peak.item() == pytest.approx(f.values.max(), abs=1e-12)


def test_esdf_gradient_matches_finite_differences():
    assert max(esdf_error(seed) for seed in range(50)) < 1e-6
