import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forgetlab import nets
from forgetlab.autodiff import Tensor
from forgetlab.nets import ConceptEmbedder, EncoderSpec, LinearHead, ModelSnapshot, SchemaError


def _snap(spec, seed=0):
    return nets.init_snapshot(spec, np.random.default_rng(seed))


def _hand_snapshot():
    spec = EncoderSpec(2, (2,), 2, "relu", (0, 1))
    params = {
        "encoder.0.weight": np.array([[1.0, 2.0], [3.0, -1.0]]),
        "encoder.0.bias": np.array([0.5, 0.5]),
        "encoder.1.weight": np.array([[1.0, 0.0], [2.0, 1.0]]),
        "encoder.1.bias": np.array([0.0, -1.0]),
    }
    return ModelSnapshot(spec, params)


# -- spec -------------------------------------------------------------------------


def test_default_spec_has_five_taps_ending_at_embedding():
    spec = EncoderSpec(32)
    assert spec.hidden_widths == (64, 64, 64, 64)
    assert spec.tap_layers == (0, 1, 2, 3, 4)
    assert spec.num_layers == 5
    assert [spec.layer_width(i) for i in spec.tap_layers] == [64, 64, 64, 64, 32]


def test_default_taps_spread_over_deep_nets():
    assert nets.default_taps(8) == (0, 2, 5, 7, 8)


@pytest.mark.parametrize("taps", [(), (1, 0), (0, 0), (0, 9), (-1, 2)])
def test_bad_tap_layers_rejected(taps):
    with pytest.raises(SchemaError):
        EncoderSpec(4, (3, 3), 2, "relu", taps)


def test_bad_activation_rejected():
    with pytest.raises(SchemaError):
        EncoderSpec(4, activation="gelu")


def test_spec_dict_round_trip():
    spec = EncoderSpec(5, (4, 3), 2, "tanh", (1, 2))
    assert EncoderSpec.from_dict(spec.to_dict()) == spec


# -- encode ---------------------------------------------------------------------------


def test_hand_computed_forward():
    emb, taps = nets.encode(_hand_snapshot(), np.array([[1.0, -2.0]]))
    # hidden: relu([1, -2] @ W0 + b0) = relu([-4.5, 4.5]); embedding is linear
    assert np.array_equal(taps[0], [[0.0, 4.5]])
    assert np.array_equal(emb, [[9.0, 3.5]])
    assert np.array_equal(taps[1], emb)


def test_zero_network_gives_zero_embedding():
    spec = EncoderSpec(3, (4, 4), 2)
    zero = ModelSnapshot(spec, {k: np.zeros(s) for k, s in spec.param_shapes()})
    emb, _ = nets.encode(zero, np.ones((5, 3)))
    assert not emb.any()


def test_encode_is_deterministic():
    snap = _snap(EncoderSpec(6))
    x = np.random.default_rng(1).normal(size=(7, 6))
    a, ta = nets.encode(snap, x)
    b, tb = nets.encode(snap, x)
    assert a.tobytes() == b.tobytes()
    assert all(p.tobytes() == q.tobytes() for p, q in zip(ta, tb))


def test_encode_rejects_wrong_width():
    with pytest.raises(SchemaError):
        nets.encode(_snap(EncoderSpec(6)), np.zeros((2, 5)))


def test_snapshot_spec_mismatch():
    spec = EncoderSpec(3, (4,), 2)
    params = {k: np.zeros(s) for k, s in spec.param_shapes()}
    params["encoder.0.weight"] = np.zeros((4, 4))
    with pytest.raises(SchemaError):
        ModelSnapshot(spec, params)
    del params["encoder.0.weight"]
    with pytest.raises(SchemaError):
        ModelSnapshot(spec, params)


def test_snapshot_params_are_read_only():
    snap = _snap(EncoderSpec(3, (4,), 2))
    with pytest.raises(ValueError):
        snap.params["encoder.0.bias"][0] = 1.0


def test_forward_matches_encode():
    snap = _snap(EncoderSpec(4, (5, 6), 3))
    x = np.random.default_rng(2).normal(size=(3, 4))
    emb, _ = nets.forward(snap.spec, nets.tensors_of(snap), Tensor(x))
    assert np.array_equal(emb.data, nets.embed(snap, x))


# -- features ------------------------------------------------------------------------------


def test_single_tap_normalisation():
    spec = EncoderSpec(2, (2,), 2, "relu", (1,))
    params = {
        "encoder.0.weight": np.eye(2),
        "encoder.0.bias": np.zeros(2),
        "encoder.1.weight": np.eye(2),
        "encoder.1.bias": np.zeros(2),
    }
    fv = nets.features_concat(ModelSnapshot(spec, params), np.array([[3.0, 4.0]]))
    assert np.allclose(fv.concatenated, [[0.6, 0.8]], atol=1e-15)


def test_tap_lengths_add_up():
    spec = EncoderSpec(3, (4, 8), 2, "relu", (0, 1))
    fv = nets.features_concat(_snap(spec), np.ones((2, 3)))
    assert [s.shape[1] for s in fv.segments] == [4, 8]
    assert fv.concatenated.shape == (2, 12)


def test_last_only_keeps_embedding_segment():
    spec = EncoderSpec(3, (4, 8), 2)
    fv = nets.features_concat(_snap(spec), np.ones((2, 3)), last_only=True)
    assert fv.concatenated.shape == (2, 2)


def test_dead_tap_stays_zero():
    spec = EncoderSpec(2, (3,), 2, "relu", (0, 1))
    params = {k: np.zeros(s) for k, s in spec.param_shapes()}
    params["encoder.1.bias"] = np.array([1.0, 0.0])
    fv = nets.features_concat(ModelSnapshot(spec, params), np.ones((1, 2)))
    assert not fv.segments[0].any()
    assert np.array_equal(fv.segments[1], [[1.0, 0.0]])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_segments_have_unit_norm(seed):
    snap = _snap(EncoderSpec(5, (16, 16, 16), 4), seed)
    x = np.random.default_rng(seed).normal(size=(6, 5))
    fv = nets.features_concat(snap, x)
    for seg in fv.segments:
        norms = np.linalg.norm(seg, axis=1)
        live = norms > 0
        assert np.all(np.abs(norms[live] - 1.0) < 1e-9)
    assert fv.concatenated.shape[1] == sum(s.shape[1] for s in fv.segments)


# -- zero-shot logits -----------------------------------------------------------------------


def test_orthonormal_head_argmax():
    w = np.linalg.qr(np.random.default_rng(3).normal(size=(4, 4)))[0]
    head = LinearHead(w)
    for j in range(4):
        assert nets.predict(nets.zs_logits(w[:, j][None, :], head))[0] == j


def test_zero_head_ties_pick_lowest_index():
    logits = nets.zs_logits(np.ones((3, 2)), LinearHead(np.zeros((2, 5))))
    assert not logits.any()
    assert list(nets.predict(logits)) == [0, 0, 0]


def test_hand_dot_products():
    head = LinearHead(np.array([[1.0, 0.0], [2.0, -1.0]]))
    logits = nets.zs_logits(np.array([[3.0, 1.0]]), head)
    assert np.array_equal(logits, [[5.0, -1.0]])


def test_head_needs_two_classes():
    with pytest.raises(SchemaError):
        LinearHead(np.zeros((3, 1)))
    with pytest.raises(SchemaError):
        LinearHead(np.zeros((3, 2)), (1, 2, 3))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_zs_argmax_scale_invariant(seed, c):
    rng = np.random.default_rng(seed)
    head = LinearHead(rng.normal(size=(4, 6)))
    e = rng.normal(size=(5, 4))
    assert np.array_equal(nets.predict(nets.zs_logits(c * e, head)), nets.predict(nets.zs_logits(e, head)))


def test_embedder_normalized_rows():
    emb = ConceptEmbedder(np.random.default_rng(0).normal(size=(5, 3)), 0.1).normalized()
    assert np.allclose(np.linalg.norm(emb.table, axis=1), 1.0, atol=1e-12)
    with pytest.raises(ValueError):
        ConceptEmbedder(np.zeros((2, 2)), 0.0)


# -- parameter geometry ---------------------------------------------------------------------


def test_param_distance_single_shift():
    a = _snap(EncoderSpec(3, (4,), 2))
    p = {k: np.array(v) for k, v in a.params.items()}
    p["encoder.0.weight"][1, 2] += 3.0
    b = a.with_updates(params=p)
    assert nets.param_sq_distance(a, a) == 0.0
    assert nets.param_sq_distance(a, b) == 9.0


def test_param_distance_ignores_head():
    a = _snap(EncoderSpec(3, (4,), 2))
    pa = dict(a.params, **{nets.HEAD_KEY: np.zeros((2, 3))})
    pb = dict(a.params, **{nets.HEAD_KEY: np.ones((2, 3))})
    assert nets.param_sq_distance(a.with_updates(params=pa), a.with_updates(params=pb)) == 0.0


def test_param_distance_brute_force():
    spec = EncoderSpec(3, (4, 5), 2)
    a, b = _snap(spec, 1), _snap(spec, 2)
    total = 0.0
    for k in a.params:
        for u, v in zip(a.params[k].ravel(), b.params[k].ravel()):
            total += (u - v) ** 2
    assert nets.param_sq_distance(a, b) == pytest.approx(total, abs=1e-12)


def test_param_distance_schema_mismatch():
    with pytest.raises(SchemaError):
        nets.param_sq_distance(_snap(EncoderSpec(3, (4,), 2)), _snap(EncoderSpec(3, (5,), 2)))


def test_interpolate_endpoints_and_midpoint():
    spec = EncoderSpec(3, (4,), 2)
    a, b = _snap(spec, 1), _snap(spec, 2)
    assert nets.interpolate(a, b, 1.0).equals(a)
    assert nets.interpolate(a, b, 0.0).equals(b)
    two = ModelSnapshot(spec, {k: np.full(s, 2.0) for k, s in spec.param_shapes()})
    four = ModelSnapshot(spec, {k: np.full(s, 4.0) for k, s in spec.param_shapes()})
    mid = nets.interpolate(two, four, 0.5)
    assert all(np.all(v == 3.0) for v in mid.params.values())
    assert mid.provenance["wise_ft_alpha"] == 0.5


def test_interpolate_rejects_bad_alpha():
    a = _snap(EncoderSpec(3, (4,), 2))
    with pytest.raises(ValueError):
        nets.interpolate(a, a, 1.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
def test_distance_properties(seed, alpha):
    spec = EncoderSpec(3, (4, 3), 2)
    rng = np.random.default_rng(seed)
    a, b = nets.init_snapshot(spec, rng), nets.init_snapshot(spec, rng)
    d_ab = nets.param_sq_distance(a, b)
    assert d_ab == pytest.approx(nets.param_sq_distance(b, a), abs=1e-12)
    assert d_ab > 0
    mid = nets.interpolate(a, b, alpha)
    assert nets.param_sq_distance(mid, a) == pytest.approx((1 - alpha) ** 2 * d_ab, abs=1e-9)


# -- serialisation -------------------------------------------------------------------------------


def test_blob_round_trip_bit_exact(tmp_path):
    spec = EncoderSpec(3, (4, 5), 2, "tanh")
    snap = _snap(spec, 7)
    params = dict(snap.params, **{nets.HEAD_KEY: np.random.default_rng(0).normal(size=(2, 3))})
    snap = ModelSnapshot(spec, params, 0.4, {"run_id": "r", "method": "m"}, (4, 9, 1))
    path = tmp_path / "s.bin"
    nets.save_snapshot(snap, path)
    back = nets.load_snapshot(path)
    assert back.equals(snap)
    assert back.spec == spec
    assert back.step_fraction == 0.4
    assert back.head_concepts == (4, 9, 1)
    assert back.provenance == snap.provenance


def test_blob_layout_header():
    snap = _snap(EncoderSpec(2, (3,), 2))
    blob = nets.dumps_snapshot(snap)
    assert blob[:8] == b"FGLSNAP1"
    assert blob[8:40] == snap.schema_hash()
    tail = np.frombuffer(blob[-8 * 2 :], dtype="<f8")
    assert np.array_equal(tail, snap.params["encoder.1.bias"])


def test_corrupt_blob_rejected():
    blob = bytearray(nets.dumps_snapshot(_snap(EncoderSpec(2, (3,), 2))))
    with pytest.raises(SchemaError):
        nets.loads_snapshot(b"XXXXXXXX" + bytes(blob[8:]))
    blob[8] ^= 0xFF
    with pytest.raises(SchemaError):
        nets.loads_snapshot(bytes(blob))
    with pytest.raises(SchemaError):
        nets.loads_snapshot(nets.dumps_snapshot(_snap(EncoderSpec(2, (3,), 2))) + b"\x00")
