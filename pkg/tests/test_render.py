import numpy as np
import pytest
import torch

from ted4.anchors import Camera
from ted4.render import ALPHA_MAX, GaussianPrimitive, Primitives, project, psnr, render, ssim

D = torch.float64


def cam(w=16, h=16):
    return Camera.look_at((0, 0, 3), (0, 0, 0), (0, 1, 0), 40.0, w, h)


def prims(means, scale, colors, opacities):
    n = len(means)
    rot = torch.zeros(n, 4, dtype=D)
    rot[:, 0] = 1
    return Primitives(torch.tensor(means, dtype=D), torch.full((n, 3), scale, dtype=D), rot,
                      torch.tensor(colors, dtype=D), torch.tensor(opacities, dtype=D), torch.arange(n))


def test_single_splat_matches_numpy_oracle():
    c = cam()
    s, o = 0.1, 0.8
    img = render(prims([[0, 0, 0]], s, [[1.0, 0.5, 0.25]], [o]), c).image.numpy()
    # isotropic splat facing the camera at depth 3
    var = (c.fx * s / 3.0) ** 2 + 0.3
    jj, ii = np.meshgrid(np.arange(16) + 0.5, np.arange(16) + 0.5)
    r2 = ((jj - c.cx) ** 2 + (ii - c.cy) ** 2) / var
    a = np.where(r2 <= 9.0, np.minimum(o * np.exp(-0.5 * r2), 0.99), 0.0)
    expect = a[..., None] * np.array([1.0, 0.5, 0.25])
    assert np.abs(img - expect).max() < 1e-12


def test_alpha_cap():
    img = render(prims([[0, 0, 0]], 2.0, [[1.0, 1.0, 1.0]], [1.0]), cam())
    assert float(img.alpha.max()) == pytest.approx(ALPHA_MAX, abs=1e-12)


def test_front_splat_wins():
    p = prims([[0, 0, 0.5], [0, 0, -0.5]], 0.3, [[1.0, 0, 0], [0, 0, 1.0]], [0.99, 0.99])
    img = render(p, cam()).image
    centre = img[8, 8]
    assert float(centre[0]) > 0.9 and float(centre[2]) < 0.05
    # input order does not matter
    swapped = p.subset(torch.tensor([1, 0]))
    swapped.ids = torch.tensor([1, 0])
    assert torch.equal(render(swapped, cam()).image, img)


def test_zero_opacity_is_pixel_identical():
    base = prims([[0.1, 0, 0], [-0.2, 0.1, 0.3]], 0.2, [[1.0, 0, 0], [0, 1.0, 0]], [0.7, 0.6])
    extra = prims([[0.1, 0, 0], [-0.2, 0.1, 0.3], [0, 0, 0.8]], 0.2, [[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]],
                  [0.7, 0.6, 0.0])
    assert torch.equal(render(base, cam()).image, render(extra, cam()).image)


def test_behind_camera_skipped():
    img = render(prims([[0, 0, 5.0]], 0.3, [[1.0, 1.0, 1.0]], [0.9]), cam(), background=(0.2, 0.2, 0.2))
    assert torch.allclose(img.image, torch.full((16, 16, 3), 0.2, dtype=D))


def test_empty_and_background():
    img = render(Primitives.empty(D), cam(10, 8), background=(0.1, 0.2, 0.3))
    assert img.image.shape == (8, 10, 3)
    assert img.image[0, 0].tolist() == pytest.approx([0.1, 0.2, 0.3])


def test_weights_sum_to_alpha():
    p = prims([[0.1, 0, 0], [-0.2, 0.1, 0.3], [0, 0, -0.4]], 0.2, [[1.0, 0, 0]] * 3, [0.7, 0.6, 0.5])
    out = render(p, cam(), with_weights=True)
    assert float(out.weights.sum()) == pytest.approx(float(out.alpha.sum()), rel=1e-10)


def test_project_centre():
    c = cam()
    _, m2, cov2 = project(prims([[0, 0, 0]], 0.1, [[1, 1, 1]], [1.0]), c)
    assert m2[0].tolist() == pytest.approx([c.cx, c.cy])
    assert float(cov2[0, 0, 1]) == pytest.approx(0.0, abs=1e-12)


def test_primitive_validation():
    with pytest.raises(ValueError):
        GaussianPrimitive(np.zeros(3), np.array([1.0, 0.0, 1.0]), np.array([1.0, 0, 0, 0]), np.ones(3), 0.5)
    with pytest.raises(ValueError):
        GaussianPrimitive(np.zeros(3), np.ones(3), np.array([2.0, 0, 0, 0]), np.ones(3), 0.5)


def test_psnr_and_ssim_identity():
    rng = np.random.default_rng(0)
    a = torch.tensor(rng.uniform(size=(16, 16, 3)))
    assert psnr(a, a) == 100.0
    assert float(ssim(a, a)) == pytest.approx(1.0, abs=1e-12)
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    small, other = a[:8, :8], a[8:, 8:]
    assert float(ssim(small, other)) == float(ssim(small, other, window=7))
    with pytest.raises(ValueError):
        ssim(a[:2, :2], a[:2, :2])


def test_ssim_flat_pair_oracle():
    # constant images: only the luminance term remains
    a = torch.full((12, 12, 1), 0.2, dtype=D)
    b = torch.full((12, 12, 1), 0.6, dtype=D)
    C1 = 0.01 ** 2
    expect = (2 * 0.2 * 0.6 + C1) / (0.2 ** 2 + 0.6 ** 2 + C1)
    assert float(ssim(a, b)) == pytest.approx(expect, abs=1e-12)
