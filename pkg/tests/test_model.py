import math

import numpy as np
import pytest

from oracles import contrastive_ce
from suede.errors import ConfigError, ContractError, DimensionError
from suede.model import (
    LOGIT_SCALE_MAX,
    DualEncoder,
    ImageClassifier,
    ModelDims,
    class_score,
    classify,
    contrastive_ce_loss,
    convert_to_sue,
    patchify,
    similarity_matrix,
    sue_layers,
    unpatchify,
)
from suede.rng import SplitMix64
from suede.tensor import Tensor, l2_normalize, no_grad
from suede.text import CharTokenizer, PromptBank

SMALL = ModelDims(depth=2, text_depth=1)


@pytest.fixture(scope="module")
def model():
    return DualEncoder(SplitMix64(0), SMALL)


def images(n, seed=0):
    return np.random.default_rng(seed).random((n, 1, 32, 32))


def test_patchify_counts_and_layout():
    img = np.arange(16.0).reshape(1, 4, 4)
    p = patchify(img, 2)
    assert p.shape == (4, 4)
    np.testing.assert_array_equal(p[0], [0, 1, 4, 5])
    np.testing.assert_array_equal(p[1], [2, 3, 6, 7])


def test_patchify_constant_and_inverse():
    assert np.ptp(patchify(np.full((1, 8, 8), 0.3), 4), axis=0).max() == 0
    img = np.random.default_rng(1).random((3, 8, 12))
    np.testing.assert_array_equal(unpatchify(patchify(img, 4), 4, 3, 8, 12), img)


def test_patchify_non_divisible():
    with pytest.raises(DimensionError):
        patchify(np.zeros((1, 6, 6)), 4)


def test_image_embeddings_unit_norm(model):
    with no_grad():
        emb, routers = model.encode_image(images(5))
    assert emb.shape == (5, SMALL.embed_dim) and routers == []
    np.testing.assert_allclose(np.linalg.norm(emb.data, axis=1), 1.0, atol=1e-9)


def test_image_shape_mismatch(model):
    with pytest.raises(DimensionError):
        model.encode_image(np.zeros((2, 1, 16, 16)))


def test_text_embeddings_unit_norm_and_eos_pooling(model):
    with no_grad():
        emb, _ = model.encode_text(["a photo of a real face", "x"])
    np.testing.assert_allclose(np.linalg.norm(emb.data, axis=1), 1.0, atol=1e-9)
    tok = CharTokenizer(32)
    ids, eos = tok.batch(["ab", "a printed photo attack of a face"])
    assert ids.shape == (2, 32) and ids[0, eos[0]] == 2 and eos[1] <= 31


def test_causal_text_ignores_padding(model):
    # trailing padding never influences the EOS position under a causal mask
    with no_grad():
        a, _ = model.encode_text(["face"])
        b, _ = model.encode_text(["face", "a much longer prompt than the first"])
    np.testing.assert_allclose(a.data[0], b.data[0], atol=1e-12)


def test_similarity_matrix_oracle():
    rng = np.random.default_rng(2)
    a = l2_normalize(Tensor(rng.normal(size=(4, 6))))
    b = l2_normalize(Tensor(rng.normal(size=(3, 6))))
    s = similarity_matrix(a, b, Tensor(np.array(0.7))).data
    np.testing.assert_allclose(s, math.exp(0.7) * a.data @ b.data.T, atol=1e-12)
    g = similarity_matrix(a, a, Tensor(np.array(0.0))).data
    np.testing.assert_allclose(np.diag(g), 1.0, atol=1e-12)


def test_similarity_clamped_scale():
    a = Tensor(np.eye(2))
    s = similarity_matrix(a, a, Tensor(np.array(10.0))).data
    assert s[0, 0] == pytest.approx(math.exp(LOGIT_SCALE_MAX))


def test_contrastive_loss_examples():
    for n in (1, 2, 8):
        assert contrastive_ce_loss(Tensor(np.zeros((n, n)))).item() == pytest.approx(math.log(n), abs=1e-9)
    assert contrastive_ce_loss(Tensor(np.ones((1, 1)) * 3)).item() == 0.0
    vals = [contrastive_ce_loss(Tensor(c * np.eye(4))).item() for c in (1, 5, 10, 20)]
    assert all(x > y for x, y in zip(vals, vals[1:])) and vals[-1] < 1e-8


def test_contrastive_loss_oracle_and_shift_invariance():
    s = np.random.default_rng(3).normal(size=(5, 5)) * 3
    assert contrastive_ce_loss(Tensor(s)).item() == pytest.approx(contrastive_ce(s), abs=1e-12)
    shifted = s + np.arange(5.0)[:, None]
    assert contrastive_ce_loss(Tensor(shifted)).item() == pytest.approx(contrastive_ce(s), abs=1e-12)
    sym = contrastive_ce_loss(Tensor(s), symmetric=True).item()
    assert sym == pytest.approx(0.5 * (contrastive_ce(s) + contrastive_ce(s.T)), abs=1e-12)


def test_contrastive_loss_non_square():
    with pytest.raises(ContractError):
        contrastive_ce_loss(Tensor(np.zeros((2, 3))))


def test_class_score_rule():
    assert class_score(np.array([[0.0, 50.0]]))[0] == pytest.approx(1.0)
    assert class_score(np.array([[2.0, 2.0]]))[0] == 0.5
    sims = np.array([[1.3, -0.4]])
    by_hand = math.exp(-0.4) / (math.exp(1.3) + math.exp(-0.4))
    assert class_score(sims)[0] == pytest.approx(by_hand, abs=1e-15)
    assert class_score(sims + 7.0)[0] == pytest.approx(class_score(sims)[0], abs=1e-12)


def test_classify_uses_max_per_class(model):
    bank = PromptBank(real=["a photo of a real face"], fake=["a photo of a fake face", "a digitally manipulated face"])
    x = images(3)
    scores = classify(model, x, bank)
    with no_grad():
        img, _ = model.encode_image(x)
        txt, _ = model.encode_text(bank.real + bank.fake_all())
        s = similarity_matrix(img, txt, model.logit_scale).data
    expect = 1 / (1 + np.exp(s[:, 0] - s[:, 1:].max(axis=1)))
    np.testing.assert_allclose(scores, expect, atol=1e-12)
    assert ((scores >= 0) & (scores <= 1)).all()


def test_classify_empty_class(model):
    with pytest.raises(ConfigError):
        classify(model, images(1), PromptBank(real=[], fake=["x"]))


def test_conversion_preserves_outputs_with_zeroed_routes():
    m = DualEncoder(SplitMix64(4), SMALL)
    x = images(4, seed=5)
    prompts = ["a photo of a real face", "a photo of a fake face"] * 2
    before, _ = m.loss_terms(x, None, prompts)
    convert_to_sue(m, "image", [0, 1], SplitMix64(9), zero_routed=True)
    convert_to_sue(m, "text", [0], SplitMix64(10), zero_routed=True)
    after, routers = m.loss_terms(x, None, prompts)
    assert abs(after.item() - before.item()) <= 1e-10
    assert len(routers) == 3 and len(sue_layers(m)) == 3


def test_conversion_errors():
    m = DualEncoder(SplitMix64(0), SMALL)
    with pytest.raises(ConfigError):
        convert_to_sue(m, "image", [2], SplitMix64(1))
    convert_to_sue(m, "image", [0], SplitMix64(1))
    with pytest.raises(ConfigError):
        convert_to_sue(m, "image", [0], SplitMix64(1))
    c = ImageClassifier(SplitMix64(0), ModelDims(depth=2, head="linear"))
    with pytest.raises(ConfigError):
        convert_to_sue(c, "text", [0], SplitMix64(1))


def test_image_classifier_loss_and_scores():
    c = ImageClassifier(SplitMix64(0), ModelDims(depth=2, head="linear"))
    x = images(4)
    loss, _ = c.loss_terms(x, np.array([0, 1, 0, 1]))
    assert loss.item() == pytest.approx(math.log(2), abs=0.05)
    s = c.fake_scores(x)
    assert s.shape == (4,) and ((s > 0) & (s < 1)).all()


def test_identical_inputs_identical_embeddings(model):
    x = np.repeat(images(1, seed=3), 2, axis=0)
    with no_grad():
        emb, _ = model.encode_image(x)
        txt, _ = model.encode_text(["a photo of a fake face"] * 2)
    np.testing.assert_array_equal(emb.data[0], emb.data[1])
    np.testing.assert_array_equal(txt.data[0], txt.data[1])


def test_empty_prompt_is_finite(model):
    with no_grad():
        emb, _ = model.encode_text([""])
    assert np.isfinite(emb.data).all()
    np.testing.assert_allclose(np.linalg.norm(emb.data), 1.0, atol=1e-9)


def test_orthogonal_embeddings_zero_similarity():
    s = similarity_matrix(Tensor(np.eye(3)[:2]), Tensor(np.eye(3)[2:]), Tensor(np.array(1.0))).data
    np.testing.assert_array_equal(s, 0.0)


def test_zeroed_routes_match_shared_only_model():
    m = DualEncoder(SplitMix64(6), SMALL)
    convert_to_sue(m, "image", [0, 1], SplitMix64(7))
    for layer in sue_layers(m):
        for e in layer.routed:
            for p in e.parameters():
                p.data[...] = 0.0
    x = images(3, seed=8)
    with no_grad():
        got, _ = m.encode_image(x)
        for blk in m.vision.blocks:
            blk.ffn = blk.ffn.shared
        want, _ = m.encode_image(x)
    np.testing.assert_allclose(got.data, want.data, atol=1e-10)


def test_conversion_without_aux_terms_to_1e12():
    m = DualEncoder(SplitMix64(14), SMALL)
    x = images(4, seed=15)
    prompts = ["a photo of a real face", "a digitally manipulated face"] * 2
    before, _ = m.loss_terms(x, None, prompts)
    convert_to_sue(m, "image", [0, 1], SplitMix64(16), zero_routed=True)
    after, _ = m.loss_terms(x, None, prompts)
    assert abs(after.item() - before.item()) <= 1e-12
