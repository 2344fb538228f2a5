import numpy as np
import pytest

from trajvad import model as M
from trajvad.features import group_mask
from trajvad.flow import LOG_2PI
from trajvad.model import FlowModel, ModelConfig, load_model, save_model
from trajvad.preprocess import fit_standardizer
from trajvad.track_io import CheckpointVersionError

from oracles import gradient_check, randomize_params, tiny_model


def identity_model(T=16, **kw):
    feats = np.random.default_rng(0).normal(size=(4, T, 27))
    return FlowModel(ModelConfig(T=T, **kw), fit_standardizer(feats))


def test_widths():
    assert identity_model().width == 30
    no_conf = ModelConfig(feature_mask=tuple(group_mask("confidence")))
    assert no_conf.d_features == 26 and no_conf.width == 29
    assert ModelConfig(feature_mask=tuple(group_mask("temporal"))).d_features == 17


def test_log_likelihood_examples():
    m = identity_model()
    x = np.full((16, 30), 3.0)
    ll, z = M.log_likelihood(m, x)
    assert ll == pytest.approx(-0.5 * 480 * LOG_2PI, rel=1e-14)
    assert np.array_equal(z, x)
    x2 = x.copy()
    x2[3, 3] += 0.5
    assert M.log_likelihood(m, x2)[0] == pytest.approx(ll - 0.125, rel=1e-14)
    assert M.nll_loss(m, x) == pytest.approx(0.5 * LOG_2PI, rel=1e-14)
    assert M.nll_loss(m, x2) == -M.log_likelihood(m, x2)[0] / 480


def test_nll_normalization_comparable_across_T():
    rng = np.random.default_rng(0)
    frames = rng.normal(3.0, 1.0, size=(32, 30))
    a = M.nll_loss(identity_model(T=16), frames[:16])
    b = M.nll_loss(identity_model(T=32), frames)
    assert abs(a - b) < 0.2 and 1.0 < a < 2.0


def test_untouched_embedding_row_and_prior_mean_gradient():
    m = identity_model(T=4)
    x = np.full((2, 4, 30), 3.0)
    loss, grads = M.backward(m, x, class_ids=[0, 0])
    assert loss == pytest.approx(0.5 * LOG_2PI)
    assert np.all(grads["input"] == 0.0)
    randomize_params(m.params(), np.random.default_rng(1))
    _, grads = M.backward(m, np.random.default_rng(2).normal(size=(2, 4, 30)), class_ids=[5, 5])
    table = grads["embedding.table"]
    assert np.any(table[5] != 0) and np.all(np.delete(table, 5, axis=0) == 0)


def test_gradient_check_t_variant():
    model, x, ids, _, _ = tiny_model("t", seed=1)
    errors = gradient_check(model, x, ids)
    assert set(errors) >= {"actnorm.bias", "actnorm.logscale", "embedding.table",
                           "coupling.0.s.0.weight", "coupling.1.t.2.bias"}
    assert max(errors.values()) < 1e-4, errors


def test_gradient_check_p_variant():
    model, x, ids, pose, gates = tiny_model("p", seed=2)
    errors = gradient_check(model, x, ids, pose, gates)
    assert any(k.startswith("pose.") and k.endswith(".cond") for k in errors)
    assert max(errors.values()) < 1e-4, errors


def test_checkpoint_round_trip_bitwise(tmp_path):
    for variant in ("t", "p"):
        model, *_ = tiny_model(variant, seed=3)
        path = tmp_path / f"{variant}.ckpt"
        save_model(model, path, {"note": "x"})
        back = load_model(path)
        assert back.config == model.config
        a, b = model.params(), back.params()
        assert set(a) == set(b)
        for k in a:
            assert a[k].tobytes() == b[k].tobytes(), k
        assert back.standardizer.mean.tobytes() == model.standardizer.mean.tobytes()
        assert back.train_record == {"note": "x"}
        save_model(back, tmp_path / "again.ckpt", {"note": "x"})
        assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_restores_feature_mask(tmp_path):
    mask = group_mask("confidence")
    feats = np.random.default_rng(0).normal(size=(6, 16, 27))
    model = FlowModel(ModelConfig(feature_mask=tuple(mask)), fit_standardizer(feats, mask))
    save_model(model, tmp_path / "m.ckpt")
    back = load_model(tmp_path / "m.ckpt")
    assert back.standardizer.n_active == 26 and back.width == 29
    assert back.standardizer.mask.tolist() == mask.tolist()


def test_checkpoint_version_error(tmp_path):
    model, *_ = tiny_model("t")
    path = tmp_path / "m.ckpt"
    save_model(model, path)
    raw = bytearray(path.read_bytes())
    raw[12] = ord("2")
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError):
        load_model(path)


def test_forward_inverse_single_and_batch():
    model, x, *_ = tiny_model("t", seed=4)
    z, ld = M.forward(model, x[0])
    assert z.shape == x[0].shape and isinstance(ld, float)
    assert np.max(np.abs(M.inverse(model, z) - x[0])) < 1e-10
    zb, ldb = M.forward(model, x)
    # batch size changes BLAS blocking, so agreement is to rounding only
    np.testing.assert_allclose(zb[0], z, rtol=0, atol=1e-12)
    assert ldb[0] == pytest.approx(ld, abs=1e-12)
