from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hetloco.errors import DegenerateBasisError, DimensionError, WireFormatError
from hetloco.linalg import RngStream, orthonormality_error
from hetloco.model import ActivationPacket, forward_stage, init_model, partition
from hetloco.subspace import (
    ProjectionBasis,
    compress_activation,
    compress_grad,
    decode_packet,
    encode_packet,
    make_basis,
    packet_nbytes,
    project,
    project_weights,
    project_writers,
    reconstruct_activation,
    reconstruct_grad,
    reproject_embedding,
    residual_out_of_subspace,
    split_embedding,
    subspace_dim,
)


def _ids(cfg, b=2, seed=1):
    return RngStream(seed, 9).integers(0, cfg.vocab, size=(b, cfg.seq_len))


def test_basis_is_seeded_and_orthonormal():
    a, b = make_basis(3, 32, 4), make_basis(3, 32, 4)
    assert np.array_equal(a.u, b.u)
    assert orthonormality_error(a.u) < 1e-12
    assert not np.array_equal(a.u, make_basis(4, 32, 4).u)


def test_basis_rejects_bad_extents():
    with pytest.raises(DimensionError):
        make_basis(0, 4, 5)
    with pytest.raises(DegenerateBasisError):
        ProjectionBasis(np.ones((4, 2)))


@pytest.mark.parametrize("d, ratio, k", [(64, 0.125, 8), (16, 0.01, 1), (16, 1.0, 16)])
def test_subspace_dim(d, ratio, k):
    assert subspace_dim(d, ratio) == k


def test_projection_is_idempotent():
    basis = make_basis(0, 16, 4)
    x = RngStream(1, 0).gaussian((3, 16))
    p = project(x, basis)
    np.testing.assert_allclose(project(p, basis), p, atol=1e-12)


def test_activation_roundtrip_is_exact_for_subspace_model(tiny):
    basis = make_basis(2, tiny.d_model, 4)
    params = project_writers(init_model(tiny, 0), basis)
    emb = split_embedding(params["embed.tok"], basis, params["embed.pos"])
    params["embed.tok"] = emb.t_s
    stages = partition(params, tiny, stages=2, tok_perp=emb.t_perp)
    ids = _ids(tiny)
    out, _ = forward_stage(stages[0], ActivationPacket(None, ids), tiny)

    outside, total = residual_out_of_subspace(out.x, ids, emb, basis)
    assert outside <= 1e-10 * total

    wire = compress_activation(out, emb, basis)
    assert wire.x.shape == (2, tiny.seq_len, 4) and wire.compressed
    back = reconstruct_activation(wire, emb, basis)
    np.testing.assert_allclose(back.x, out.x, atol=1e-10)


def test_gradient_compression_is_the_adjoint():
    basis = make_basis(5, 16, 6)
    rng = RngStream(6, 0)
    g, v = rng.gaussian((2, 3, 16)), rng.gaussian((2, 3, 6))
    # <compress(g), v> == <g, reconstruct(v)>
    assert np.sum(compress_grad(g, basis) * v) == pytest.approx(np.sum(g * reconstruct_grad(v, basis)))


def test_compress_rejects_wrong_width_and_state():
    basis = make_basis(0, 16, 4)
    emb = split_embedding(np.zeros((8, 16)), basis, np.zeros((4, 16)))
    ids = np.zeros((1, 4), dtype=np.int64)
    with pytest.raises(DimensionError):
        compress_activation(ActivationPacket(np.zeros((1, 4, 12)), ids), emb, basis)
    with pytest.raises(DimensionError):
        reconstruct_activation(ActivationPacket(np.zeros((1, 4, 4)), ids), emb, basis)
    with pytest.raises(DimensionError):
        compress_grad(np.zeros((2, 5)), basis)


def test_embedding_split_sums_to_table():
    basis = make_basis(1, 16, 4)
    te = RngStream(2, 0).gaussian((32, 16))
    emb = split_embedding(te, basis, np.zeros((4, 16)))
    np.testing.assert_allclose(emb.table(), te, atol=1e-12)
    np.testing.assert_allclose(emb.t_perp @ basis.u, 0, atol=1e-12)


def test_reprojection_moves_drift_and_preserves_table():
    basis = make_basis(1, 16, 4)
    emb = split_embedding(RngStream(2, 0).gaussian((32, 16)), basis, np.zeros((4, 16)))
    drifted = replace(emb, t_s=emb.t_s + RngStream(3, 0).gaussian((32, 16)) * 0.1)
    fixed = reproject_embedding(drifted, basis)
    np.testing.assert_allclose(fixed.table(), drifted.table(), atol=1e-12)
    np.testing.assert_allclose(project(fixed.t_s, basis), fixed.t_s, atol=1e-12)


def test_writer_projection_touches_only_writers(tiny):
    basis = make_basis(0, tiny.d_model, 4)
    params = init_model(tiny, 0)
    projected = project_writers(params, basis)
    assert projected["layers.0.wq"] is params["layers.0.wq"]
    np.testing.assert_allclose(project(projected["layers.1.w2"], basis), projected["layers.1.w2"], atol=1e-12)


def test_packet_wire_layout():
    ids = np.arange(6).reshape(2, 3)
    pkt = ActivationPacket(np.ones((2, 3, 4), dtype=np.float32), ids, compressed=True)
    buf = encode_packet(pkt)
    assert len(buf) == sum(packet_nbytes(pkt)) == 16 + 6 * 4 + 24 * 4
    back = decode_packet(buf)
    assert back.compressed and np.array_equal(back.token_ids, ids) and np.array_equal(back.x, pkt.x)
    with pytest.raises(WireFormatError):
        decode_packet(buf[:-2])


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 24), st.integers(1, 24), st.integers(0, 2**32))
def test_gradient_compression_is_non_expansive(d, k, seed):
    basis = make_basis(seed, d, min(k, d))
    g = RngStream(seed, 1).gaussian((2, 3, d))
    assert np.linalg.norm(compress_grad(g, basis)) <= np.linalg.norm(g) * (1 + 1e-12)
    np.testing.assert_allclose(reconstruct_grad(compress_grad(g, basis), basis), project(g, basis), atol=1e-12)


def _stage(tiny, seed=0):
    return partition(init_model(tiny, seed), tiny, stages=2)[1]


def test_project_weights_keeps_rows_already_in_the_subspace(tiny):
    basis = make_basis(4, tiny.d_model, 4)
    stage = _stage(tiny)
    inside = replace(stage, params={k: project(v, basis) if k.endswith(".w2") else v for k, v in stage.params.items()})
    out = project_weights(inside, basis)
    for name, value in inside.params.items():
        if name.endswith(".w2"):
            np.testing.assert_allclose(out.params[name], value, atol=1e-12)


def test_full_width_projection_is_the_identity(tiny):
    basis = make_basis(4, tiny.d_model, tiny.d_model)
    stage = _stage(tiny)
    out = project_weights(stage, basis)
    for name, value in stage.params.items():
        np.testing.assert_allclose(out.params[name], value, atol=1e-12)


def test_project_weights_is_idempotent_and_leaves_other_tensors(tiny):
    basis = make_basis(4, tiny.d_model, 4)
    stage = _stage(tiny)
    once = project_weights(stage, basis)
    twice = project_weights(once, basis)
    assert (once.index, once.layers, once.is_last) == (stage.index, stage.layers, stage.is_last)
    for name, value in stage.params.items():
        np.testing.assert_allclose(twice.params[name], once.params[name], atol=1e-12)
        if not name.endswith((".wo", ".w2")):
            assert once.params[name] is value
    assert not np.allclose(once.params["layers.3.wo"], stage.params["layers.3.wo"])
