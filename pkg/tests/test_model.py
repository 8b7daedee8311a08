import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dcal import tensor as T
from dcal.attention import encoder_block
from dcal.embedding import ImageSample, embed_tokens, patchify_batch
from dcal.model import (
    ConfigError,
    DcalConfig,
    DcalModel,
    DcalParams,
    PairBatch,
    cross_entropy,
    dynamic_loss,
    forward_batch,
    forward_infer,
    forward_train,
    infer_batch,
    init_params,
    param_shapes,
    total_loss,
    triplet_loss,
)
from dcal.tensor import ContractError, ShapeError, Tensor

from . import oracles as O

TINY = DcalConfig(
    depth=2, pwca_blocks=2, glca_blocks=1, dim=8, heads=2, patch_size=2,
    image_height=4, image_width=4, num_classes=3, ratio=0.5, drop_path_max=0.0,
)


def spread(params, seed, scale=0.3):
    """Move every tensor away from its init so the oracle sees generic values."""
    rng = np.random.default_rng(seed)
    for t in params.named().values():
        t.data[...] = t.data + scale * rng.normal(size=t.shape)
    return params


def images(cfg, n, seed=0):
    return np.random.default_rng(seed).random((n, cfg.image_height, cfg.image_width, cfg.channels)).astype(np.float32)


# config


def test_config_validation():
    with pytest.raises(ConfigError):
        DcalConfig(pwca_blocks=5).validate()
    with pytest.raises(ConfigError):
        DcalConfig(dim=30, heads=4).validate()
    with pytest.raises(ConfigError):
        DcalConfig(ratio=0.0).validate()
    with pytest.raises(ConfigError):
        DcalConfig(task="detection").validate()
    assert DcalConfig().glca_depth == 4 and DcalConfig().num_local == 1
    assert DcalConfig(task="retrieval").num_local == 4


def test_param_shapes_cover_all_groups():
    names = param_shapes(TINY)
    assert names["loss_weights"] == (3,)
    assert names["embed.pos"] == (5, 8)
    assert "glca.wq" in names and "blocks.1.w2" in names
    assert not any(n.startswith("pwca") for n in names)


def test_from_named_rejects_inconsistent_tensors():
    named = init_params(TINY).named()
    with pytest.raises(ShapeError):
        DcalParams.from_named(TINY, {k: v for k, v in named.items() if k != "head.bias"})
    named["head.bias"] = Tensor(np.zeros(4))
    with pytest.raises(ShapeError):
        DcalParams.from_named(TINY, named)


# forward


def test_forward_matches_straight_line_oracle():
    with T.default_dtype(np.float64):
        params = spread(init_params(TINY, 0, np.float64), 1)
        imgs = images(TINY, 2, 2).astype(np.float64)
        out = forward_batch(imgs, TINY, params, partner=np.array([1, 0]), training=True)
    for i in range(2):
        ref = O.forward(imgs[i], TINY, params, partner_img=imgs[1 - i])
        assert out.selection.indices[i].tolist() == ref["rows"]
        for key in ("logits_sa", "logits_glca", "logits_pwca", "cls_sa", "cls_glca", "cls_pwca"):
            np.testing.assert_allclose(getattr(out, key).data[i], ref[key], rtol=1e-10, atol=1e-12)


def test_glca_depth_knob_matches_oracle():
    cfg = dataclasses.replace(TINY, glca_depth=1)
    with T.default_dtype(np.float64):
        params = spread(init_params(cfg, 0, np.float64), 3)
        imgs = images(cfg, 1, 4).astype(np.float64)
        out = forward_batch(imgs, cfg, params)
    ref = O.forward(imgs[0], cfg, params)
    np.testing.assert_allclose(out.logits_glca.data[0], ref["logits_glca"], rtol=1e-10, atol=1e-12)


def test_identical_pair_pwca_equals_sa():
    params = spread(init_params(TINY, 0), 5)
    img = ImageSample(images(TINY, 1, 6)[0])
    first, second = forward_train(PairBatch(img, img), TINY, params)
    for out in (first, second):
        assert np.abs(out.logits_pwca.data - out.logits_sa.data).max() < 1e-4


def test_plain_vit_config_has_no_extra_branches():
    cfg = dataclasses.replace(TINY, glca_blocks=0, pwca_blocks=0)
    params = init_params(cfg)
    out = forward_batch(images(cfg, 2), cfg, params, partner=np.array([1, 0]), training=True)
    assert out.logits_glca is None and out.logits_pwca is None
    assert params.glca is None


def plain_vit_logits(imgs, cfg, params):
    x = embed_tokens(
        Tensor(patchify_batch((imgs - 0.5) / 0.25, cfg.patch_size).astype(np.float32)),
        params.proj, params.cls, params.pos,
    )
    for blk in params.blocks:
        x, _ = encoder_block(x, blk, cfg.heads)
    cls = T.layer_norm(x[:, 0], params.norm.gamma, params.norm.beta)
    return (cls @ params.head_w + params.head_b).data


def test_sa_mode_equals_plain_vit_bitwise():
    params = spread(init_params(TINY, 0), 7)
    imgs = images(TINY, 3, 8)
    with T.no_grad():
        ref = plain_vit_logits(imgs, TINY, params)
    assert infer_batch(imgs, TINY, params, "sa").logits_sa.tobytes() == ref.tobytes()


def test_pwca_removal_is_bitwise_free():
    params = spread(init_params(TINY, 0), 9)
    imgs = images(TINY, 3, 10)
    full = DcalModel(TINY, params)
    stripped = full.without_pwca()
    assert stripped.pwca_blocks == [] and full.pwca_blocks[0] is params.blocks[0]
    for mode in ("sa", "glca", "sa+glca"):
        assert full.infer(imgs, mode).probs.tobytes() == stripped.infer(imgs, mode).probs.tobytes()


def test_train_and_infer_sa_logits_agree():
    params = spread(init_params(TINY, 0), 11)
    a, b = (ImageSample(x) for x in images(TINY, 2, 12))
    first, _ = forward_train(PairBatch(a, b), TINY, params)
    infer = forward_infer(a, TINY, params, "sa")
    np.testing.assert_allclose(first.logits_sa.data, infer.logits_sa, atol=1e-6)


def test_fused_probabilities_match_oracle():
    params = spread(init_params(TINY, 0), 13)
    img = ImageSample(images(TINY, 1, 14)[0])
    pred = forward_infer(img, TINY, params, "sa+glca")
    oracle = O.softmax(pred.logits_sa.astype(np.float64)) + O.softmax(pred.logits_glca.astype(np.float64))
    np.testing.assert_allclose(pred.probs, oracle, rtol=1e-6)
    assert pred.label == int(np.argmax(oracle))


def test_fused_argmax_when_branches_agree():
    params = spread(init_params(TINY, 0), 15)
    params.glca_head_w.data[...] = 0
    params.glca_head_b.data[...] = 0
    params.head_w.data[...] = 0
    params.head_b.data[...] = [0.0, 2.0, 1.0]
    params.glca_head_b.data[...] = [0.0, 2.0, 1.0]
    pred = infer_batch(images(TINY, 2, 16), TINY, params, "sa+glca")
    assert pred.label.tolist() == [1, 1]


def test_retrieval_feature_concatenates_class_tokens():
    cfg = dataclasses.replace(TINY, task="retrieval")
    params = init_params(cfg)
    pred = infer_batch(images(cfg, 2), cfg, params, "sa+glca")
    assert pred.feature.shape == (2, 16)
    assert infer_batch(images(cfg, 2), cfg, params, "glca").feature.shape == (2, 8)


def test_infer_rejects_unknown_mode():
    with pytest.raises(ValueError):
        infer_batch(images(TINY, 1), TINY, init_params(TINY), "pwca")
    cfg = dataclasses.replace(TINY, glca_blocks=0)
    with pytest.raises(ValueError):
        infer_batch(images(cfg, 1), cfg, init_params(cfg), "glca")


def test_infer_rejects_wrong_image_size():
    with pytest.raises(ShapeError):
        infer_batch(np.zeros((1, 8, 8, 1)), TINY, init_params(TINY), "sa")


# losses


def test_dynamic_loss_examples():
    losses = [Tensor(1.0), Tensor(2.0), Tensor(3.0)]
    assert dynamic_loss(losses, Tensor(np.zeros(3))).item() == 3.0
    assert dynamic_loss([Tensor(0.0)], Tensor(np.zeros(1))).item() == 0.0
    with T.default_dtype(np.float64):
        value = dynamic_loss([Tensor(1.0), Tensor(2.0), Tensor(3.0)], Tensor([0.1, -0.2, 0.0])).item()
    assert abs(value - 3.1238214671781495) < 1e-14
    with pytest.raises(ValueError):
        dynamic_loss(losses, Tensor(np.zeros(2)))


@given(st.lists(st.tuples(st.floats(0, 10), st.floats(-3, 3)), min_size=1, max_size=5), st.randoms())
def test_dynamic_loss_permutation_invariant(pairs, rnd):
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    with T.default_dtype(np.float64):
        a = dynamic_loss([Tensor(l) for l, _ in pairs], Tensor([w for _, w in pairs])).item()
        b = dynamic_loss([Tensor(l) for l, _ in shuffled], Tensor([w for _, w in shuffled])).item()
    assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


def test_dynamic_loss_gradients_reach_weights():
    w = Tensor([0.3, -0.1], requires_grad=True, dtype=np.float64)
    l0 = Tensor(2.0, requires_grad=True, dtype=np.float64)
    T.backward(dynamic_loss([l0, Tensor(1.0, dtype=np.float64)], w))
    np.testing.assert_allclose(w.grad, [0.5 * (1 - math.exp(-0.3) * 2.0), 0.5 * (1 - math.exp(0.1))], rtol=1e-12)
    assert l0.grad == pytest.approx(0.5 * math.exp(-0.3))


def test_cross_entropy_examples():
    assert cross_entropy(Tensor(np.zeros(5)), 2).item() == pytest.approx(math.log(5), rel=1e-6)
    logits = np.zeros(4)
    logits[1] = 50.0
    assert cross_entropy(Tensor(logits), 1).item() < 1e-6
    with T.default_dtype(np.float64):
        assert cross_entropy(Tensor([1.0, 2.0, 3.0]), 0).item() == pytest.approx(2.40760596444438, rel=1e-14)
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros(3)), 3)


def test_triplet_examples():
    feats = Tensor([[0.0, 0.0], [0.0, 0.0], [5.0, 0.0]], dtype=np.float64)
    assert triplet_loss(feats, [0, 0, 1], 0.3).item() == 0.0
    same = Tensor(np.zeros((4, 2)), dtype=np.float64)
    assert triplet_loss(same, [0, 0, 1, 1], 0.3).item() == pytest.approx(0.3, abs=1e-6)


def test_triplet_four_point_oracle():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0], [3.0, 0.0]])
    labels = [0, 0, 1, 1]
    # exhaustive enumeration: anchors 0,1 are inactive; anchors 2,3 give sqrt(13) - 2 + 0.3
    assert triplet_loss(Tensor(pts, dtype=np.float64), labels, 0.3).item() == pytest.approx(
        0.9527756377319946, rel=1e-12
    )


def test_triplet_degenerate_batch():
    with pytest.raises(ContractError):
        triplet_loss(Tensor(np.ones((3, 2))), [0, 1, 2], 0.3)


def test_total_loss_branch_set():
    params = init_params(TINY)
    out = forward_batch(images(TINY, 4), TINY, params, partner=np.array([1, 2, 3, 0]), training=True)
    loss, parts = total_loss(out, np.array([0, 1, 2, 0]), TINY, params)
    assert set(parts) == {"sa", "glca", "pwca"}
    assert loss.item() == pytest.approx(0.5 * sum(v.item() for v in parts.values()), rel=1e-6)
    infer_out = forward_batch(images(TINY, 4), TINY, params)
    assert set(total_loss(infer_out, np.array([0, 1, 2, 0]), TINY, params)[1]) == {"sa", "glca"}


@given(st.sampled_from([0.25, 0.5, 0.75, 1.0]))
def test_glca_class_token_ignores_selection_size(ratio):
    # one GLCA block read out at its class token: attention is per query and
    # LN/FFN act per row, so the chosen local rows cannot reach the CLS output
    params = spread(init_params(TINY, 0), 21)
    imgs = images(TINY, 2, 22)
    base = infer_batch(imgs, TINY, params, "glca").logits_glca
    other = infer_batch(imgs, dataclasses.replace(TINY, ratio=ratio), params, "glca").logits_glca
    np.testing.assert_allclose(other, base, atol=1e-6)
