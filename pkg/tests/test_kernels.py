import numpy as np
import pytest

from mdg import _kernels_py, kernels

BACKENDS = kernels.backends()


@pytest.fixture(params=sorted(BACKENDS))
def impl(request):
    return BACKENDS[request.param]


def test_dispatch_exposes_backend():
    assert kernels.BACKEND in BACKENDS


def test_forward_matches_reference(impl):
    rng = np.random.default_rng(0)
    init = rng.normal(size=(7, 4))
    u = rng.normal(size=(7, 9, 2))
    assert np.array_equal(impl.rollout_forward(init, u, 0.1, 2), _kernels_py.rollout_forward(init, u, 0.1, 2))


def test_backward_matches_reference(impl):
    rng = np.random.default_rng(1)
    init = rng.normal(size=(5, 4))
    u = rng.normal(size=(5, 6, 2))
    st = _kernels_py.rollout_forward(init, u, 0.1, 2)
    g = rng.normal(size=st.shape)
    for a, b in zip(impl.rollout_backward(st, g, 0.1, 2), _kernels_py.rollout_backward(st, g, 0.1, 2)):
        assert np.allclose(a, b, rtol=1e-13, atol=1e-13)


def test_obb_matches_reference(impl):
    rng = np.random.default_rng(2)
    boxes = np.concatenate([rng.uniform(-6, 6, (20, 6, 2)), rng.uniform(-3, 3, (20, 6, 1)),
                            rng.uniform(0.5, 5, (20, 6, 2))], axis=-1)
    got = impl.obb_overlap_frames(boxes)
    assert np.array_equal(got, _kernels_py.obb_overlap_frames(boxes))
    assert not got[:, np.arange(6), np.arange(6)].any()
    assert np.array_equal(got, got.transpose(0, 2, 1))


def test_touching_boxes_do_not_overlap(impl):
    boxes = np.array([[[0.0, 0.0, 0.0, 2.0, 2.0], [2.0, 0.0, 0.0, 2.0, 2.0]]])
    assert not impl.obb_overlap_frames(boxes).any()
    boxes[0, 1, 0] = 1.999
    assert impl.obb_overlap_frames(boxes)[0, 0, 1]


def test_env_forces_fallback():
    import os
    import subprocess
    import sys
    env = dict(os.environ, MDG_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from mdg import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True)
    assert out.stdout.strip() == "python"
