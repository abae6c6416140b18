import json

import numpy as np
import pytest

import forceworld as fw

TINY_NET = {
    "height": 24,
    "width": 24,
    "patch_size": 4,
    "token_dim": 16,
    "n_blocks": 2,
    "n_heads": 2,
    "control_grid": 8,
    "control_blocks": 2,
}


@pytest.fixture(scope="module")
def model(tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "model.fwa"
    fw.Model.save_untrained(str(path), json.dumps(TINY_NET), ode_steps=3, seed=5)
    return fw.Model.load(str(path))


def test_path_endpoints_and_field():
    rng = np.random.default_rng(0)
    y0, y1 = rng.normal(size=8), rng.normal(size=8)
    np.testing.assert_allclose(fw.sample_path(y1, 0.0, y0), y0)
    np.testing.assert_allclose(fw.sample_path(y1, 1.0, y0), y1 + 1e-7 * y0, atol=1e-12)
    t, h = 0.4, 1e-6
    fd = (fw.sample_path(y1, t + h, y0) - fw.sample_path(y1, t - h, y0)) / (2 * h)
    u = fw.target_vector_field(fw.sample_path(y1, t, y0), y1, t)
    np.testing.assert_allclose(u, fd, rtol=1e-6)


def test_simulate_shapes_and_ranges():
    clip = fw.simulate("pusher", n_frames=4, seed=3, size=24)
    assert clip["frames"].shape == (4, 3, 24, 24)
    assert clip["flows"].shape == (3, 2, 24, 24)
    assert clip["masks"].shape[0] == 4
    assert clip["frames"].min() >= 0.0 and clip["frames"].max() <= 1.0
    assert clip["agent_index"] >= 0


def test_control_sampling_follows_flow():
    flow = np.zeros((2, 8, 8), dtype=np.float32)
    flow[:, 2, 5] = [1.0, -2.0]
    (p,) = fw.sample_control_pixels(flow, 1, seed=1)
    assert (p.i, p.j, p.di, p.dj) == (2, 5, 1.0, -2.0)
    raster = fw.build_sparse_raster([p], 8, 8)
    assert raster.shape == (3, 8, 8)
    assert raster[0].sum() == 1.0 and raster[1, 2, 5] == 1.0


def test_block_matching_and_metrics():
    rng = np.random.default_rng(2)
    a = rng.random((3, 16, 16)).astype(np.float32)
    b = np.roll(a, (1, 2), axis=(1, 2))
    flow = fw.block_match_flow(a, b, block=3, radius=3)
    assert tuple(flow[:, 8, 8]) == (1.0, 2.0)
    assert fw.psnr(a, a) == 99.0
    assert fw.ssim(a, a) == pytest.approx(1.0)
    m = np.zeros((4, 4), dtype=bool)
    m[:2] = True
    assert fw.iou(m, m) == 1.0


def test_session_generates_frames(model):
    frame = fw.simulate("pusher", n_frames=3, seed=1, size=24)["frames"][0]
    s = fw.Session(model, frame, seed=9)
    nxt = s.step([fw.ControlPoint(4, 4, 1.0, 0.0)])
    assert nxt.shape == (3, 24, 24)
    assert np.isfinite(nxt).all() and nxt.min() >= 0.0 and nxt.max() <= 1.0
    twin = s.clone()
    assert np.array_equal(s.step(), twin.step())
    assert len(s.rollout(2)) == 2
    assert s.frame_index == 4


def test_errors_map_to_python(model, tmp_path):
    frame = np.zeros((3, 24, 24), dtype=np.float32)
    s = fw.Session(model, frame)
    with pytest.raises(fw.DomainError):
        s.step([fw.ControlPoint(99, 0, 1.0, 1.0)])
    with pytest.raises(fw.FormatError):
        fw.Model.load(str(tmp_path / "missing.fwa"))


def test_session_sampler_overrides(model):
    frame = fw.simulate("pusher", n_frames=3, seed=2, size=24)["frames"][0]
    a = fw.Session(model, frame, seed=4, ode_steps=2, integrator="midpoint").step()
    b = fw.Session(model, frame, seed=4, ode_steps=2, integrator="midpoint").step()
    assert np.array_equal(a, b)
    with pytest.raises(fw.ConfigError):
        fw.Session(model, frame, integrator="rk4")
