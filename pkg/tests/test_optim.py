"""Adam optimizer behavior."""

import numpy as np
import pytest

from surflow.autodiff import ParamStore
from surflow.optim import AdamState, adam_step, clip_global_norm


def _store(values):
    store = ParamStore()
    store.register("w", np.asarray(values, dtype=float))
    return store


def test_zero_gradient_leaves_params_unchanged():
    store = _store([1.0, -2.0])
    state = AdamState.for_store(store, lr=1e-3)
    adam_step(state, store)
    np.testing.assert_array_equal(store.values, [1.0, -2.0])
    assert state.step_count == 1


def test_first_step_magnitude_is_lr():
    # with g=1 everywhere, bias correction makes the first update -lr exactly
    # up to the eps term
    store = _store([0.0, 0.0, 0.0])
    store.grads[:] = 1.0
    state = AdamState.for_store(store, lr=1e-4)
    adam_step(state, store)
    np.testing.assert_allclose(store.values, -1e-4, rtol=1e-6)


def test_quadratic_bowl_converges():
    # minimize w^2 from w=5: |w| < 1e-3 after 2000 steps at lr=1e-2
    store = _store([5.0])
    state = AdamState.for_store(store, lr=1e-2)
    for _ in range(2000):
        store.zero_grads()
        store.grads[:] = 2.0 * store.values
        adam_step(state, store)
    assert abs(store.values[0]) < 1e-3


def test_step_counter_and_moments_update():
    store = _store([1.0])
    store.grads[:] = 2.0
    state = AdamState.for_store(store, lr=1e-3)
    adam_step(state, store)
    np.testing.assert_allclose(state.m, [0.2])  # (1-beta1)*g
    np.testing.assert_allclose(state.v, [0.004])  # (1-beta2)*g^2
    store.grads[:] = 2.0
    adam_step(state, store)
    assert state.step_count == 2


def test_size_mismatch_rejected():
    store = _store([1.0, 2.0])
    state = AdamState(m=np.zeros(3), v=np.zeros(3), lr=1e-3)
    with pytest.raises(ValueError):
        adam_step(state, store)


def test_clip_global_norm():
    g = np.array([3.0, 4.0])
    norm = clip_global_norm(g, 1.0)
    assert norm == pytest.approx(5.0)
    np.testing.assert_allclose(np.linalg.norm(g), 1.0)
    g2 = np.array([0.3, 0.4])
    clip_global_norm(g2, 1.0)
    np.testing.assert_allclose(g2, [0.3, 0.4])
