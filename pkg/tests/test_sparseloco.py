import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from pydantic import ValidationError

from hetloco.errors import DimensionError, NumericalFailure, SyncError
from hetloco.linalg import RngStream
from hetloco.model import init_model, loss_and_grads
from hetloco.sparseloco import (
    AdamWConfig,
    InnerOptState,
    LRSchedule,
    OuterConfig,
    ReplicaState,
    adamw_update,
    average_grads,
    clip_global_norm,
    compress_pseudograd,
    inner_step,
    lr_at,
    outer_round,
    pseudo_gradient,
)
from hetloco.topk import ChunkSpec, densify


def test_first_adamw_step_matches_hand_computation():
    params = {"b": np.array([0.0])}
    state = InnerOptState.zeros_like(params)
    state.step = 1
    adamw_update(params, {"b": np.array([0.1])}, state, AdamWConfig(), lr=1e-3)
    # m_hat = 0.1, v_hat = 0.01
    assert params["b"][0] == pytest.approx(-1e-3 * 0.1 / (0.1 + 1e-8), abs=1e-15)


def test_weight_decay_applies_to_matrices_only():
    params = {"w": np.ones((2, 2)), "gain": np.ones(2)}
    state = InnerOptState.zeros_like(params)
    state.step = 1
    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    adamw_update(params, zeros, state, AdamWConfig(weight_decay=0.1), lr=1e-3)
    np.testing.assert_allclose(params["w"], 1.0 - 1e-4)
    np.testing.assert_array_equal(params["gain"], 1.0)


def test_clip_scales_to_max_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, total = clip_global_norm(grads, 1.0)
    assert total == pytest.approx(5.0)
    assert clipped["a"][0] == pytest.approx(0.6) and clipped["b"][0] == pytest.approx(0.8)
    same, _ = clip_global_norm(grads, None)
    assert same is grads


@pytest.mark.parametrize("step, expected", [(0, 0.0), (5, 0.5), (10, 1.0), (110, 0.1), (500, 0.1), (60, 0.55)])
def test_lr_schedule(step, expected):
    schedule = LRSchedule(peak=1.0, warmup_steps=10, total_steps=110, min_ratio=0.1)
    assert lr_at(step, schedule) == pytest.approx(expected)


def test_optimizer_config_validation():
    with pytest.raises(ValidationError):
        AdamWConfig(lr=0)
    with pytest.raises(ValidationError):
        OuterConfig(H=0)
    assert OuterConfig(H=3, M=2).inner_steps == 3


def test_outer_round_averages_and_steps():
    theta = {"w": np.full(3, 10.0)}
    contributions = [{"w": np.full(3, 1.0)}, {"w": np.full(3, 2.0)}]
    updated = outer_round(theta, contributions, eta=1.0, replicas=2)
    np.testing.assert_array_equal(updated["w"], 8.5)
    np.testing.assert_array_equal(theta["w"], 10.0)


def test_outer_round_rejects_missing_contributions():
    theta = {"w": np.zeros(2), "b": np.zeros(1)}
    with pytest.raises(SyncError):
        outer_round(theta, [{"w": np.zeros(2), "b": np.zeros(1)}], eta=1.0, replicas=2)
    with pytest.raises(SyncError):
        outer_round(theta, [{"w": np.zeros(2)}], eta=1.0, replicas=1)


def test_pseudo_gradient_shape_check():
    r = ReplicaState.fresh(0, {"w": np.zeros((2, 2))})
    with pytest.raises(DimensionError):
        pseudo_gradient({"w": np.zeros((2, 3))}, r)


def test_full_density_without_memory_sends_the_exact_delta():
    cfg = OuterConfig(beta=0.0, chunk=ChunkSpec(chunk_len=8, k_per_chunk=8), M=1)
    rng = RngStream(0, 0)
    global_params = {"w": rng.gaussian((3, 5))}
    r = ReplicaState.fresh(0, global_params)
    r.params["w"] += rng.gaussian((3, 5))
    deltas = pseudo_gradient(global_params, r)
    sent = compress_pseudograd(r, deltas, cfg)
    np.testing.assert_array_equal(densify(sent["w"]), deltas["w"])
    assert not r.errors["w"].e.any()


def test_single_replica_single_step_round_equals_adamw(tiny):
    """M=1, H=1, full density, beta=0, eta=1: one round is one AdamW step."""
    params = init_model(tiny, 0)
    ids = RngStream(1, 9).integers(0, tiny.vocab, size=(2, tiny.seq_len + 1))
    batch = (ids[:, :-1], ids[:, 1:])
    adam = AdamWConfig(lr=1e-2, warmup_steps=0)
    schedule = adam.schedule(10)
    grad_fn = lambda p, b: loss_and_grads(p, tiny, *b)

    reference = ReplicaState.fresh(0, params)
    inner_step(reference, batch, grad_fn, adam, schedule)

    cfg = OuterConfig(H=1, M=1, beta=0.0, eta=1.0, chunk=ChunkSpec(chunk_len=64, k_per_chunk=64))
    r = ReplicaState.fresh(0, params)
    inner_step(r, batch, grad_fn, adam, schedule)
    sent = compress_pseudograd(r, pseudo_gradient(params, r), cfg)
    updated = outer_round(params, [sent], cfg.eta, cfg.replicas)
    for name in params:
        np.testing.assert_allclose(updated[name], reference.params[name], rtol=0, atol=1e-12)


def test_inner_step_reports_replica_on_nan():
    r = ReplicaState.fresh(3, {"w": np.zeros(2)})
    adam = AdamWConfig()
    with pytest.raises(NumericalFailure) as info:
        inner_step(r, (None, None), lambda p, b: (float("nan"), {"w": np.zeros(2)}), adam, adam.schedule(10))
    assert info.value.replica == 3
    assert r.opt.step == 0


def test_average_grads_in_order():
    out = average_grads([{"g": np.array([1.0])}, {"g": np.array([2.0])}, {"g": np.array([6.0])}])
    assert out["g"][0] == pytest.approx(3.0)
    with pytest.raises(SyncError):
        average_grads([])


@settings(max_examples=30, deadline=None)
@given(st.permutations(range(4)))
def test_outer_round_sums_in_replica_order_whatever_the_arrival(order):
    # magnitudes chosen so a different summation order changes the bits
    parts = [{"w": np.array([1e16, 1.0])}, {"w": np.array([1.0, 3.0])}, {"w": np.array([-1e16, 1e-3])}, {"w": np.array([1.0, 7.0])}]
    theta = {"w": np.zeros(2)}
    in_order = outer_round(theta, parts, eta=1.0, replicas=4)
    arrived = {m: parts[m] for m in order}
    assert np.array_equal(outer_round(theta, arrived, eta=1.0, replicas=4)["w"], in_order["w"])
