import itertools

import numpy as np
import pytest

from splab.detector import (
    BBox,
    DegenerateBoxError,
    Detector,
    InstanceAnnotation,
    LossWeights,
    ModelConfig,
    Target,
    class_logits,
    giou,
    hungarian_match,
    soft_area_targets,
    total_loss,
)
from splab.detector.boxes import generalized_box_iou, giou_tensor
from splab.detector.losses import layer_terms, match_layer
from splab.detector.model import LayerOutput, VisionEncoder, sinusoidal_positions, upsample_mask_logits
from splab.numcore import CrossAttention, Tensor, grad_check
from splab.numcore import ops

SMALL = ModelConfig(image_size=16, patch=8, d=8, encoder_layers=2, decoder_layers=2, k=2, bins=16, seed=3)


# -- boxes ---------------------------------------------------------------------


def test_bbox_rejects_zero_extent():
    with pytest.raises(DegenerateBoxError):
        BBox(0.5, 0.5, 0.0, 0.1)


def test_giou_examples():
    a = BBox(0.3, 0.4, 0.2, 0.1)
    assert giou(a, a) == pytest.approx(1.0, abs=1e-12)
    far = giou(BBox(0.1, 0.1, 0.1, 0.1), BBox(0.9, 0.9, 0.1, 0.1))
    # hull 0.9^2 = 0.81, union 0.02 -> -(0.79 / 0.81)
    assert far < -0.5 and far == pytest.approx(-0.79 / 0.81, abs=1e-12)
    touch = giou(BBox(0.25, 0.5, 0.5, 0.5), BBox(0.75, 0.5, 0.5, 0.5))
    assert touch == pytest.approx(0.0, abs=1e-12)


def test_giou_rejects_degenerate():
    with pytest.raises(DegenerateBoxError):
        generalized_box_iou(np.array([0.1, 0.1, 0.1, 0.5]), np.array([0.0, 0.0, 1.0, 1.0]))


def test_giou_tensor_matches_numpy():
    rng = np.random.default_rng(0)
    pred = np.column_stack([rng.uniform(0.2, 0.8, (6, 2)), rng.uniform(0.05, 0.4, (6, 2))])
    gt = np.column_stack([rng.uniform(0.2, 0.8, (6, 2)), rng.uniform(0.05, 0.4, (6, 2))])
    from splab.detector.boxes import cxcywh_to_xyxy

    got = giou_tensor(Tensor(pred), cxcywh_to_xyxy(gt)).data
    want = np.diag(generalized_box_iou(cxcywh_to_xyxy(pred), cxcywh_to_xyxy(gt)))
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_instance_from_mask_is_tight():
    mask = np.zeros((64, 64), bool)
    mask[10:14, 20:31] = True
    inst = InstanceAnnotation.from_mask(mask, 2)
    np.testing.assert_allclose(inst.bbox.to_pixels_xyxy(64, 64), [20, 10, 31, 14], atol=1e-9)
    with pytest.raises(ValueError):
        InstanceAnnotation.from_mask(np.zeros((4, 4)), 0)


# -- matching ------------------------------------------------------------------


def test_hungarian_trivial_and_nan():
    assert hungarian_match(np.array([[3.0]])) == [(0, 0)]
    with pytest.raises(ValueError):
        hungarian_match(np.array([[1.0, np.nan]]))


def brute_force(cost):
    n, m = cost.shape
    best = np.inf
    if n <= m:
        for perm in itertools.permutations(range(m), n):
            best = min(best, sum(cost[i, j] for i, j in enumerate(perm)))
    else:
        for perm in itertools.permutations(range(n), m):
            best = min(best, sum(cost[i, j] for j, i in enumerate(perm)))
    return best


def test_hungarian_5x5_against_enumeration():
    for seed in range(100):
        cost = np.random.default_rng(seed).random((5, 5))
        pairs = hungarian_match(cost)
        assert len(pairs) == 5
        assert sum(cost[i, j] for i, j in pairs) == pytest.approx(brute_force(cost), abs=1e-12)


def test_hungarian_rectangular_up_to_7():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n, m = (int(v) for v in rng.integers(1, 8, size=2))
        cost = rng.normal(size=(n, m))
        pairs = hungarian_match(cost)
        assert len(pairs) == min(n, m)
        assert len({i for i, _ in pairs}) == len({j for _, j in pairs}) == len(pairs)
        assert sum(cost[i, j] for i, j in pairs) == pytest.approx(brute_force(cost), abs=1e-9)


def test_matching_cost_uses_default_weights():
    from splab.detector.matching import matching_cost

    w = LossWeights()
    assert (w.cls, w.l1, w.giou, w.bce, w.dice, w.cpe, w.dn) == (4, 5, 2, 5, 5, 1, 0)
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(3, 2))
    boxes = np.array([[0.5, 0.5, 0.2, 0.2], [0.3, 0.3, 0.1, 0.2], [0.7, 0.6, 0.3, 0.1]])
    gt = np.array([[0.45, 0.5, 0.2, 0.25]])
    c_all = matching_cost(logits, boxes, None, np.array([1]), gt, None, w)
    c_l1 = matching_cost(logits, boxes, None, np.array([1]), gt, None, LossWeights(0, 1, 0, 0, 0))
    np.testing.assert_allclose(c_l1[:, 0], np.abs(boxes - gt).sum(1), atol=1e-12)
    assert c_all.shape == (3, 1)


# -- model ---------------------------------------------------------------------


def test_encoder_token_count():
    enc = VisionEncoder(ModelConfig(), np.random.default_rng(0))
    assert enc(np.zeros((64, 64))).shape == (64, 32)


def test_encoder_rejects_indivisible():
    with pytest.raises(ValueError):
        ModelConfig(image_size=60, patch=8)
    enc = VisionEncoder(SMALL, np.random.default_rng(0))
    with pytest.raises(ValueError):
        enc(np.zeros((15, 16)))


def test_zero_image_gives_positions():
    cfg = ModelConfig(zero_residual=True)
    enc = VisionEncoder(cfg, np.random.default_rng(0))
    np.testing.assert_array_equal(enc(np.zeros((64, 64))).data, sinusoidal_positions(8, 32))


def test_positions_distinct():
    pos = sinusoidal_positions(8, 32)
    d = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
    assert (d + np.eye(64) > 1e-3).all()


@pytest.mark.parametrize("seed", range(20))
def test_grad_check_encoder(seed):
    rng = np.random.default_rng(seed)
    enc = VisionEncoder(SMALL, rng)
    image = Tensor(rng.random((16, 16)))
    readout = rng.normal(size=(4, 8))
    params = [enc.embed.bias, enc.blocks[0].attn.q.weight, enc.blocks[1].ffn.layers[0].bias]
    assert grad_check(lambda img, *ps: (enc(img) * readout).sum(), [image, *params], 1e-5, 1e-4)


def test_single_token_attention_returns_its_value():
    rng = np.random.default_rng(0)
    ca = CrossAttention(4, rng)
    ca.v.weight.data = np.eye(4)
    ca.v.bias.data = np.zeros(4)
    ca.o.weight.data = np.eye(4)
    ca.o.bias.data = np.zeros(4)
    token = rng.normal(size=(1, 4))
    for _ in range(5):
        x = rng.normal(size=(3, 4)) * 10
        np.testing.assert_allclose(ca(x, token).data, np.repeat(token, 3, axis=0), atol=1e-12)


def test_identity_readout_exposes_hidden_states():
    model = Detector(SMALL)
    model.decoder.h.weight.data = np.eye(8)
    model.decoder.h.bias.data = np.zeros(8)
    rng = np.random.default_rng(1)
    q, p, f = rng.normal(size=(2, 8)), rng.normal(size=(3, 8)), rng.normal(size=(4, 8))
    outs, hidden = model.decoder(q, p, f)
    assert len(outs) == SMALL.decoder_layers
    for (qh, ph), h in zip(outs, hidden):
        np.testing.assert_array_equal(qh.data, h.data[:2])
        np.testing.assert_array_equal(ph.data, h.data[2:])


def test_decoder_rejects_dimension_mismatch():
    model = Detector(SMALL)
    with pytest.raises(ValueError, match="dimension mismatch"):
        model.decoder(np.zeros((2, 8)), np.zeros((3, 7)), np.zeros((4, 8)))


def test_decoder_default_depth():
    assert ModelConfig().decoder_layers == 3


@pytest.mark.parametrize("seed", range(20))
def test_grad_check_decoder(seed):
    rng = np.random.default_rng(seed)
    model = Detector(SMALL)
    q, p, f = (Tensor(rng.normal(size=s)) for s in ((2, 8), (3, 8), (4, 8)))
    r = rng.normal(size=(5, 8))

    def fn(q, p, f, w):
        outs, _ = model.decoder(q, p, f)
        return sum(((ops.concat([a, b], axis=0) * r).sum() for a, b in outs), Tensor(0.0))

    w = model.decoder.layers[0].cross.k.weight
    assert grad_check(fn, [q, p, f, w], 1e-5, 1e-4)


def test_logits_examples():
    u = np.array([0.6, 0.8, 0.0])
    assert class_logits(u[None], u[None]).data[0, 0] == pytest.approx(1.0, abs=1e-15)
    assert class_logits(np.array([[1.0, 0, 0]]), np.array([[0, 1.0, 0]])).data[0, 0] == 0.0
    rng = np.random.default_rng(0)
    p, q = rng.normal(size=(2, 3)), rng.normal(size=(4, 3))
    y = class_logits(p, q).data
    for i in range(4):
        for c in range(2):
            assert abs(y[i, c] - sum(p[c, j] * q[i, j] for j in range(3))) <= 1e-12


def test_logits_bilinear_and_argmax_scale_invariant():
    rng = np.random.default_rng(1)
    for _ in range(50):
        p, q = rng.normal(size=(3, 5)), rng.normal(size=(4, 5))
        c = rng.uniform(0.1, 10.0, size=(4, 1))
        y, ys = class_logits(p, q).data, class_logits(p, q * c).data
        np.testing.assert_allclose(ys, y * c, atol=1e-12)
        assert (ys.argmax(1) == y.argmax(1)).all()


def test_forward_shapes_and_pqs_selection():
    cfg = ModelConfig(image_size=32, d=16, k=4, decoder_layers=2, bins=32)
    model = Detector(cfg)
    rng = np.random.default_rng(0)
    out = model.forward(rng.random((2, 32, 32)), rng.normal(size=(3, 16)))
    assert len(out.layers) == 2
    lay = out.layers[-1]
    assert lay.class_logits.shape == (2, 4, 3) and lay.boxes.shape == (2, 4, 4)
    assert lay.mask_logits.shape == (2, 4, 64)
    assert out.selected.shape == (2, 4) and (np.diff(out.selected, axis=1) > 0).all()
    assert ((lay.boxes.data > 0) & (lay.boxes.data < 1)).all()


def test_learned_query_mode():
    cfg = ModelConfig(image_size=32, d=16, k=4, bins=32, use_pqs=False)
    model = Detector(cfg)
    out = model.forward(np.zeros((1, 32, 32)), np.ones((2, 16)))
    assert out.selected is None and out.layers[0].class_logits.shape == (1, 4, 2)
    assert any(name == "query_embed" for name, _ in model.named_parameters())


def test_embed_prompts_shape():
    cfg = ModelConfig(image_size=32, d=16, k=4, bins=32)
    model = Detector(cfg)
    rng = np.random.default_rng(0)
    m = np.zeros((32, 32), bool)
    m[3:9, 4:12] = True
    e = model.embed_prompts(rng.random((2, 32, 32)), [(0, m), (1, m), (1, np.roll(m, 10, axis=0))])
    assert e.shape == (3, 16)


def test_predict_errors_and_threshold():
    cfg = ModelConfig(image_size=32, d=16, k=4, bins=32)
    model = Detector(cfg)
    img = np.random.default_rng(0).random((32, 32))
    with pytest.raises(ValueError, match="no prompted classes"):
        model.predict(img, [])
    # huge prototypes saturate the logits; the score must still stay below 1
    big = np.full((2, 16), 1e6)
    assert len(model.predict(img, big, score_threshold=1.0)) == 0
    full = model.predict(img, big, score_threshold=0.0)
    # one row per (query, class) pair
    assert len(full) == 8 and full.masks.shape == (8, 32, 32)
    assert sorted(zip(full.query_indices, full.labels)) == [(q, c) for q in range(4) for c in range(2)]
    assert (np.diff(full.scores) <= 0).all()


def test_predict_missing_prototype_file(tmp_path):
    model = Detector(SMALL)
    with pytest.raises(FileNotFoundError):
        model.predict(np.zeros((16, 16)), tmp_path / "missing.bin")


def test_upsample_mask_logits_constant():
    out = upsample_mask_logits(np.full((1, 16), 2.5), 4, (16, 16))
    np.testing.assert_allclose(out, 2.5)


def test_checkpoint_round_trip(tmp_path):
    model = Detector(SMALL)
    path = tmp_path / "m.bin"
    model.save(path)
    back = Detector.load(path)
    assert back.config == model.config
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), back.named_parameters()):
        assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()
    with pytest.raises(FileNotFoundError):
        Detector.load(tmp_path / "nothing.bin")


# -- losses --------------------------------------------------------------------


def block_mask(y0, x0, y1, x1, size=16):
    m = np.zeros((size, size))
    m[y0:y1, x0:x1] = 1.0
    return m


def perfect_layer():
    """One query predicting the single GT exactly, a second one confidently background."""
    mask = block_mask(4, 8, 12, 16)
    box = np.array([0.75, 0.5, 0.5, 0.5])
    target = Target([0], [box], [soft_area_targets(mask, 4)])
    big = 40.0
    layer = LayerOutput(
        class_logits=Tensor(np.array([[[big], [-big]]])),
        boxes=Tensor(np.array([[box, [0.2, 0.2, 0.1, 0.1]]])),
        mask_logits=Tensor(np.where(target.masks[0] > 0, big, -big)[None, None].repeat(2, axis=1)),
    )
    return layer, target


def test_perfect_fit_floor():
    layer, target = perfect_layer()
    terms = layer_terms(layer, [target], [[(0, 0)]])
    assert terms["l1"].data == 0.0
    assert abs(terms["giou"].data) <= 1e-15
    assert terms["dice"].data <= 1e-6
    assert terms["bce"].data < 1e-3
    assert terms["cls"].data < 1e-3
    assert match_layer(layer, [target], LossWeights()) == [[(0, 0)]]


def random_problem(rng, n_layers=3, b=2, k=5, n_cls=3, n_gt=(2, 3), pix=16):
    layers = [
        LayerOutput(
            class_logits=Tensor(rng.normal(size=(b, k, n_cls))),
            boxes=Tensor(np.column_stack([rng.uniform(0.3, 0.7, (b * k, 2)), rng.uniform(0.1, 0.3, (b * k, 2))]).reshape(b, k, 4)),
            mask_logits=Tensor(rng.normal(size=(b, k, pix))),
        )
        for _ in range(n_layers)
    ]
    targets = []
    for n in n_gt:
        boxes = np.column_stack([rng.uniform(0.3, 0.7, (n, 2)), rng.uniform(0.1, 0.3, (n, 2))])
        targets.append(Target(rng.integers(0, n_cls, n), boxes, rng.random((n, pix))))
    return layers, targets


def test_doubling_weights_doubles_terms():
    layers, targets = random_problem(np.random.default_rng(0))
    w = LossWeights()
    _, a = total_loss(layers, targets, w)
    matches = [match_layer(l, targets, w) for l in layers]
    _, b = total_loss(layers, targets, w.scaled(2.0), matches=matches)
    for ta, tb in zip(a.layer_totals, b.layer_totals):
        assert tb == 2 * ta
    assert b.total == 2 * a.total


def test_gt_permutation_invariance_bit_level():
    rng = np.random.default_rng(4)
    for _ in range(10):
        layers, targets = random_problem(rng)
        base, _ = total_loss(layers, targets)
        perm_targets = []
        for t in targets:
            p = rng.permutation(len(t.classes))
            perm_targets.append(Target(t.classes[p], t.boxes[p], t.masks[p]))
        again, _ = total_loss(layers, perm_targets)
        assert base.data.tobytes() == again.data.tobytes()


def test_deep_supervision_removal():
    layers, targets = random_problem(np.random.default_rng(5))
    w = LossWeights()
    full, bd = total_loss(layers, targets, w)
    for drop in range(len(layers)):
        kept = [l for i, l in enumerate(layers) if i != drop]
        part, _ = total_loss(kept, targets, w)
        recomputed = sum(t for i, t in enumerate(bd.layer_totals) if i != drop)
        assert part.data == pytest.approx(recomputed, rel=1e-13)
        assert full.data - part.data == pytest.approx(bd.layer_totals[drop], rel=1e-9)


def test_prompt_loss_added_with_weight():
    layers, targets = random_problem(np.random.default_rng(6))
    base, _ = total_loss(layers, targets, LossWeights())
    withp, bd = total_loss(layers, targets, LossWeights(cpe=2.0), prompt_loss=Tensor(0.75))
    assert withp.data == pytest.approx(base.data + 1.5, abs=1e-12) and bd.cpe == 0.75


def test_assignment_layer_mismatch_rejected():
    layers, targets = random_problem(np.random.default_rng(7))
    with pytest.raises(ValueError):
        total_loss(layers, targets, matches=[[[], []]])


def test_unmatched_queries_pushed_to_background():
    layers, targets = random_problem(np.random.default_rng(8), n_layers=1)
    cls = layers[0].class_logits
    cls.requires_grad = True
    w = LossWeights(1, 0, 0, 0, 0, 0)
    loss, _ = total_loss(layers, targets, w)
    loss.backward()
    matched = {(b, q) for b, pairs in enumerate(match_layer(layers[0], targets, w)) for q, _ in pairs}
    for b in range(2):
        for q in range(5):
            if (b, q) not in matched:
                assert (cls.grad[b, q] > 0).all()  # descent lowers every class logit


@pytest.mark.parametrize("seed", range(20))
def test_grad_check_total_loss_toy(seed):
    rng = np.random.default_rng(seed)
    logits = Tensor(rng.normal(size=(1, 2, 2)))
    raw_boxes = Tensor(rng.normal(size=(1, 2, 4)) * 0.5)
    masks = Tensor(rng.normal(size=(1, 2, 9)))
    gt_box = np.array([[0.5, 0.5, 0.3, 0.4]])
    target = Target([1], gt_box, rng.random((1, 9)))
    # fix the assignment so the finite differences never cross a matching boundary
    probe = LayerOutput(logits, ops.sigmoid(raw_boxes), masks)
    matches = [match_layer(probe, [target], LossWeights())]

    def fn(lg, rb, mk):
        layer = LayerOutput(lg, ops.sigmoid(rb), mk)
        return total_loss([layer], [target], matches=matches)[0]

    assert grad_check(fn, [logits, raw_boxes, masks], 1e-5, 1e-3)


def test_soft_area_targets():
    m = np.zeros((8, 8))
    m[0:2, 0:4] = 1
    np.testing.assert_allclose(soft_area_targets(m, 4), [0.5, 0.0, 0.0, 0.0])
