import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpmia import features, nnet
from gpmia.errors import ConfigError, FeatureSchemaMismatch, InsufficientData, MissingNtkContext

from conftest import dense_ntk_oracle, small_net, unit_for


def test_feature_config_orders_families():
    cfg = features.FeatureConfig(families=("ntk", "common"))
    assert cfg.families == ("common", "ntk")
    assert cfg.names[0] == "common.accuracy"
    assert cfg.names[-1] == "ntk.sim_mean"
    with pytest.raises(ConfigError):
        features.FeatureConfig(families=("bogus",))
    with pytest.raises(ConfigError):
        features.FeatureConfig(families=())


def test_common_features_by_hand():
    model = small_net(2)
    unit = unit_for(model, 5, seed=1)
    cfg = features.FeatureConfig(finetune_epochs=0)
    vals = dict(features.common_features(model, unit, cfg))
    logits = nnet.forward(model, unit.samples)
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    idx = np.arange(5)
    assert vals["accuracy"] == pytest.approx(np.mean(np.argmax(p, 1) == unit.labels))
    assert vals["entropy"] == pytest.approx(np.mean(-np.sum(p * np.log(p), axis=1)), rel=1e-12)
    assert vals["loss"] == pytest.approx(np.mean(-np.log(p[idx, unit.labels])), rel=1e-12)
    assert vals["confidence"] == pytest.approx(np.mean(p.max(axis=1)), rel=1e-12)
    assert vals["correct_prob"] == pytest.approx(np.mean(p[idx, unit.labels]), rel=1e-12)
    assert vals["perturbation"] == 0.0
    assert vals["input_mean"] == pytest.approx(unit.samples.mean())
    assert vals["input_var"] == pytest.approx(unit.samples.var())


def test_grad_features_average_bundles():
    model = small_net(3)
    unit = unit_for(model, 4, seed=2)
    vals = dict(features.grad_features(model, unit))
    bundles = [nnet.sensitivity_bundle(model, x, y) for x, y in zip(unit.samples, unit.labels)]
    assert vals["loss"] == pytest.approx(np.mean([b.loss_value for b in bundles]), rel=1e-12)
    assert vals["loss_grad_norm"] == pytest.approx(np.mean([b.loss_grad_norm for b in bundles]), rel=1e-12)
    assert vals["param_jac_fro"] == pytest.approx(np.mean([b.param_jac_fro for b in bundles]), rel=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_ntk_leverage_matches_dense_inverse(seed):
    model = small_net(seed)
    ref = unit_for(model, 8, seed=seed + 10)
    probe = unit_for(model, 3, seed=seed + 20)
    ctx = features.build_ntk_context(model, ref, lam=0.5)
    stats = features.ntk_sample_stats(ctx, features.flat_jacobians(model, probe.samples))
    tau, h = dense_ntk_oracle(model, ref.samples, probe.samples, 0.5)
    np.testing.assert_allclose(stats[:, 0], tau, rtol=1e-8)
    np.testing.assert_allclose(stats[:, 1], np.linalg.norm(h, axis=1), rtol=1e-8)
    np.testing.assert_allclose(stats[:, 2], np.max(np.abs(h), axis=1), rtol=1e-8)


def test_ntk_similarity_of_reference_point_is_one():
    model = small_net(4)
    ref = unit_for(model, 5, seed=3)
    ctx = features.build_ntk_context(model, ref, lam=1.0)
    stats = features.ntk_sample_stats(ctx, features.flat_jacobians(model, ref.samples[:1]))
    assert stats[0, 3] == pytest.approx(1.0, abs=1e-12)


def test_ntk_degenerate_point_warns(caplog):
    model = small_net(4)
    ctx = features.build_ntk_context(model, unit_for(model, 5), lam=1.0)
    with caplog.at_level(logging.WARNING):
        stats = features.ntk_sample_stats(ctx, np.zeros((1, ctx.reference_jacobians.shape[1])))
    assert stats[0, 3] == 0.0 and stats[0, 4] == 0.0
    assert stats[0, 0] == 0.0
    assert "degenerate" in caplog.text


def test_extract_needs_ntk_context():
    model = small_net(0)
    cfg = features.FeatureConfig(families=("common", "ntk"))
    with pytest.raises(MissingNtkContext):
        features.extract(model, unit_for(model), cfg)


def test_extract_all_families():
    model = small_net(0)
    cfg = features.FeatureConfig(families=("common", "grad", "ntk"), ntk_lambda=0.1)
    ctx = features.build_ntk_context(model, unit_for(model, 6, seed=9), cfg.ntk_lambda)
    fv = features.extract(model, unit_for(model, uid="abc"), cfg, ctx)
    assert fv.names == tuple(cfg.names)
    assert fv.unit_id == "abc"
    assert np.all(np.isfinite(fv.values))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000))
def test_leverage_nonnegative_and_monotone_in_lambda(seed):
    model = small_net(seed % 50)
    ref = unit_for(model, 6, seed=seed)
    J = features.flat_jacobians(model, unit_for(model, 2, seed=seed + 1).samples)
    taus = [features.ntk_sample_stats(features.build_ntk_context(model, ref, lam), J)[:, 0]
            for lam in (1e-3, 1e-2, 1e-1, 1.0, 10.0)]
    for a, b in zip(taus, taus[1:]):
        assert np.all(a >= 0)
        assert np.all(b <= a * (1 + 1e-12) + 1e-12)


def test_standardizer_round_trip():
    fvs = [features.FeatureVector([1.0, 5.0], ("a", "b")), features.FeatureVector([3.0, 5.0], ("a", "b"))]
    std = features.fit_standardizer(fvs)
    assert std.means.tolist() == [2.0, 5.0]
    assert std.stds.tolist() == [1.0, 1e-12]
    z = features.apply(std, fvs[0])
    assert z.values.tolist() == [-1.0, 0.0]
    back = features.Standardizer.from_dict(std.to_dict())
    assert back.means.tolist() == std.means.tolist() and back.names == std.names
    with pytest.raises(InsufficientData):
        features.fit_standardizer(fvs[:1])


def test_schema_mismatch_names_missing_columns():
    std = features.fit_standardizer([features.FeatureVector([1.0, 2.0], ("a", "b")),
                                     features.FeatureVector([2.0, 3.0], ("a", "b"))])
    with pytest.raises(FeatureSchemaMismatch, match="b"):
        std.apply(features.FeatureVector([1.0, 2.0], ("a", "c")))


def test_feature_vector_validation():
    with pytest.raises(ConfigError):
        features.FeatureVector([float("nan")], ("a",))
    with pytest.raises(ConfigError):
        features.FeatureVector([1.0, 2.0], ("a", "a"))


def test_store_round_trip_is_exact(tmp_path):
    r = np.random.default_rng(0)
    recs = [(features.FeatureVector(r.standard_normal(3) * 10.0 ** r.integers(-20, 20, 3), ("a", "b", "c"), f"u{i}"),
             i % 2, {"group": "g"}) for i in range(5)]
    features.write_store(tmp_path / "s.jsonl", recs, fingerprint="fp")
    back = features.read_store(tmp_path / "s.jsonl")
    assert [b.vector.values.tobytes() for b in back] == [fv.values.tobytes() for fv, _, _ in recs]
    assert [b.label for b in back] == [0, 1, 0, 1, 0]
    assert back[0].fingerprint == "fp" and back[0].meta == {"group": "g"}


def test_store_rejects_malformed(tmp_path):
    p = tmp_path / "s.jsonl"
    p.write_text('{"unit_id": "x"}\n')
    with pytest.raises(ConfigError, match=":1:"):
        features.read_store(p)


def test_fingerprint_is_key_order_independent():
    assert features.config_fingerprint({"a": 1, "b": 2}) == features.config_fingerprint({"b": 2, "a": 1})
    assert len(features.config_fingerprint({})) == 16


def _zero_net():
    arch = nnet.MlpArchitecture(3, (4,), 2, "relu")
    return nnet.TargetModel(arch, np.zeros(arch.n_params))


def test_zero_network_common_features():
    unit = features.AuditUnit(np.ones((4, 3)), [0, 1, 0, 1])
    vals = dict(features.common_features(_zero_net(), unit, features.FeatureConfig()))
    assert vals["entropy"] == pytest.approx(np.log(2.0), rel=1e-15)
    assert vals["confidence"] == 0.5


def test_confident_correct_unit():
    # hidden layer copies x[0] shifted into the active region; outputs +-60 * x[0]
    arch = nnet.MlpArchitecture(1, (1,), 2, "relu")
    model = nnet.TargetModel(arch, np.array([1.0, 10.0, -60.0, 60.0, 600.0, -600.0]))
    unit = features.AuditUnit(np.array([[1.0], [2.0], [-1.0], [-2.0]]), [1, 1, 0, 0])
    vals = dict(features.common_features(model, unit, features.FeatureConfig(finetune_epochs=0)))
    assert vals["accuracy"] == 1.0
    assert vals["entropy"] < 1e-20
    assert vals["loss"] < 1e-20


def test_accuracy_recount():
    model = small_net(6)
    unit = unit_for(model, 40, seed=3)
    vals = dict(features.common_features(model, unit, features.FeatureConfig(finetune_epochs=0)))
    count = sum(int(np.argmax(nnet.forward(model, x)) == y) for x, y in zip(unit.samples, unit.labels))
    assert vals["accuracy"] == count / 40


def test_grad_features_single_and_duplicated_sample():
    model = small_net(7)
    x, y = np.array([0.3, -0.2, 0.9]), 2
    b = nnet.sensitivity_bundle(model, x, y)
    one = dict(features.grad_features(model, features.AuditUnit(x[None, :], [y])))
    two = dict(features.grad_features(model, features.AuditUnit(np.vstack([x, x]), [y, y])))
    expected = {"param_jac_fro": b.param_jac_fro, "input_jac_fro": b.input_jac_fro,
                "loss": b.loss_value, "loss_grad_norm": b.loss_grad_norm}
    assert one == expected
    for k in expected:
        assert two[k] == pytest.approx(expected[k], rel=1e-15)


def test_gram_examples():
    model = small_net(8)
    r = np.array([[0.2, -0.4, 0.6]])
    ctx = features.build_ntk_context(model, features.AuditUnit(r, [0]), 1.0)
    J = nnet.parameter_jacobian(model, r[0])
    assert ctx.gram.shape == (1, 1)
    assert ctx.gram[0, 0] == pytest.approx(np.sum(J * J), rel=1e-12)
    dup = features.build_ntk_context(model, features.AuditUnit(np.vstack([r, r, r * 2]), [0, 0, 1]), 1.0)
    assert np.array_equal(dup.gram[0], dup.gram[1])
    ref = unit_for(model, 5, seed=4)
    Js = [nnet.parameter_jacobian(model, x).ravel() for x in ref.samples]
    explicit = np.array(Js) @ np.array(Js).T
    np.testing.assert_allclose(features.build_ntk_context(model, ref, 1.0).gram, explicit, rtol=1e-12)


def test_single_reference_closed_form():
    model = small_net(9)
    r = np.array([[0.1, 0.5, -0.3]])
    J = features.flat_jacobians(model, r)
    k = float(J[0] @ J[0])
    ctx = features.build_ntk_context(model, features.AuditUnit(r, [1]), lam=k)
    tau, h_norm, h_max, s_max, s_mean = features.ntk_sample_stats(ctx, J)[0]
    assert tau == pytest.approx(k / 2, rel=1e-12)
    assert h_norm == pytest.approx(0.5, rel=1e-12)
    assert h_max == pytest.approx(0.5, rel=1e-12)
    assert s_max == pytest.approx(1.0, abs=1e-12) and s_mean == pytest.approx(1.0, abs=1e-12)


def test_huge_lambda_shrinks_leverage():
    model = small_net(10)
    ref = unit_for(model, 4, seed=1)
    ctx0 = features.build_ntk_context(model, ref, 1.0)
    k = float(np.max(np.diag(ctx0.gram)))
    ctx = features.build_ntk_context(model, ref, 1e12 * k)
    stats = features.ntk_sample_stats(ctx, features.flat_jacobians(model, ref.samples))
    assert np.all(stats[:, 0] < 1e-10 * k)
    assert np.all(stats[:, 1] < 1e-10)


def test_family_counts():
    model = small_net(0)
    unit = unit_for(model)
    assert len(features.extract(model, unit, features.FeatureConfig()).values) == 8
    cfg = features.FeatureConfig(families=("common", "grad", "ntk"))
    ctx = features.build_ntk_context(model, unit, 1.0)
    fv = features.extract(model, unit, cfg, ctx)
    assert len(fv.values) == 17
    fv = features.extract(model, unit, features.FeatureConfig(families=("grad",)))
    assert all(n.startswith("grad.") for n in fv.names)


def test_standardizer_hand_values():
    std = features.fit_standardizer([features.FeatureVector([0.0], ("a",)), features.FeatureVector([2.0], ("a",))])
    assert std.means.tolist() == [1.0] and std.stds.tolist() == [1.0]
    assert features.apply(std, features.FeatureVector([0.0], ("a",))).values.tolist() == [-1.0]


def test_standardized_fit_set_is_unit_scaled():
    r = np.random.default_rng(5)
    vecs = [features.FeatureVector(r.standard_normal(4) * [1, 10, 1e3, 1e-3] + 7, tuple("abcd")) for _ in range(30)]
    std = features.fit_standardizer(vecs)
    Z = np.vstack([std.apply(v).values for v in vecs])
    np.testing.assert_allclose(Z.mean(axis=0), 0.0, atol=1e-10)
    np.testing.assert_allclose(Z.std(axis=0), 1.0, atol=1e-10)
