import itertools

import numpy as np
import pytest
import torch

from maskpoint.checkpoint import MAGIC, load_checkpoint, read_blocks, save_checkpoint
from maskpoint.errors import DegenerateBox, FormatError, ShapeError
from maskpoint.model import (
    DESIGNS,
    MODES,
    REDUCTIONS,
    Backbone,
    BoxHead,
    Fusion,
    FusionConfig,
    KeypointHead,
    MaskHead,
    MaskPointRCNN,
    ModelConfig,
    fuse,
    init_parameters,
    roi_extract,
)

from oracles import bilinear, central_difference_grad, relative_error

torch.set_num_threads(1)


def _gen(seed=0):
    return torch.Generator().manual_seed(seed)


def _applicable_variants():
    for design in DESIGNS:
        reductions = REDUCTIONS if design in ("a", "b") else ("maxpool",)  # reduction unused for c, d
        for reduction, mode in itertools.product(reductions, MODES):
            yield design, reduction, mode


VARIANTS = list(_applicable_variants())


# backbone and RoI sampling

def test_backbone_shape_and_errors():
    bb = Backbone(features=64)
    init_parameters(bb, _gen())
    assert bb(torch.rand(1, 3, 128, 128)).shape == (1, 64, 32, 32)
    with pytest.raises(ShapeError):
        bb(torch.rand(1, 3, 30, 32))
    with pytest.raises(ShapeError):
        bb(torch.rand(1, 1, 32, 32))


def test_backbone_zero_input_and_determinism():
    bb = Backbone(features=16, width=8)
    init_parameters(bb, _gen())
    assert bb(torch.zeros(1, 3, 32, 32)).abs().max().item() == 0.0
    x = torch.rand(2, 3, 32, 32, generator=_gen(1))
    assert torch.equal(bb(x), bb(x))


def test_roi_full_cover_returns_grid():
    feats = torch.arange(32, dtype=torch.float64).reshape(1, 2, 4, 4)
    out = roi_extract(feats, [[0.0, 0.0, 16.0, 16.0]], out_size=4, stride=4)
    assert torch.allclose(out[0], feats[0], atol=1e-12)


def test_roi_matches_hand_bilinear():
    rng = np.random.default_rng(0)
    grid = rng.normal(size=(6, 7))
    feats = torch.from_numpy(grid)[None, None]
    for _ in range(20):
        top, left = rng.uniform(0, 10, 2)
        h, w = rng.uniform(2, 14, 2)
        S = 5
        out = roi_extract(feats, [[top, left, h, w]], out_size=S, stride=4)[0, 0].numpy()
        for i in range(S):
            for j in range(S):
                y = (top + (i + 0.5) * h / S) / 4 - 0.5
                x = (left + (j + 0.5) * w / S) / 4 - 0.5
                assert out[i, j] == pytest.approx(bilinear(grid, y, x), abs=1e-12)


def test_roi_constant_map():
    feats = torch.full((1, 3, 8, 8), 2.5, dtype=torch.float64)
    out = roi_extract(feats, [[3.3, 1.7, 9.1, 20.2], [0, 0, 32, 32]], out_size=14)
    assert torch.allclose(out, torch.full_like(out, 2.5), atol=1e-12)


def test_roi_shift_by_one_stride():
    g = _gen(3)
    feats = torch.randn(1, 2, 10, 10, generator=g, dtype=torch.float64)
    box = torch.tensor([[6.0, 5.0, 12.0, 14.0]])
    moved = box + torch.tensor([[0.0, 4.0, 0.0, 0.0]])
    a = roi_extract(feats, moved, out_size=7)
    # the same box on a map shifted one cell left sees the same content
    shifted = torch.roll(feats, shifts=-1, dims=3)
    b = roi_extract(shifted, box, out_size=7)
    assert torch.allclose(a, b, atol=1e-12)


def test_roi_degenerate_box():
    with pytest.raises(DegenerateBox):
        roi_extract(torch.zeros(1, 1, 4, 4), [[0, 0, 0.5, 4]])


def test_roi_batch_index():
    feats = torch.stack([torch.zeros(1, 4, 4), torch.ones(1, 4, 4)]).double()
    out = roi_extract(feats, [[0, 0, 8, 8], [0, 0, 8, 8]], batch_index=[1, 0], out_size=2)
    assert out[0].eq(1).all() and out[1].eq(0).all()


# heads

def test_head_shapes():
    roi = torch.rand(3, 64, 14, 14)
    box = BoxHead(64, 4)
    cls, deltas = box(roi)
    assert cls.shape == (3, 5) and deltas.shape == (3, 16)
    assert MaskHead(64, 4)(roi).shape == (3, 4, 28, 28)
    assert KeypointHead(64, 17, upsamples=2)(roi).shape == (3, 17, 56, 56)
    assert KeypointHead(64, 17, upsamples=1)(roi).shape == (3, 17, 28, 28)


def test_zero_weights_give_zero_logits():
    roi = torch.rand(2, 8, 14, 14)
    box = BoxHead(8, 4, hidden=16)
    for p in box.parameters():
        torch.nn.init.zeros_(p)
    cls, deltas = box(roi)
    assert cls.abs().max() == 0 and deltas.abs().max() == 0
    mask = MaskHead(8, 4, width=8)
    init_parameters(mask, _gen())
    torch.nn.init.zeros_(mask.out.weight)
    logits = mask(roi)
    assert logits.abs().max() == 0
    assert torch.sigmoid(logits).eq(0.5).all()


def _randomize_biases(module, seed=123):
    # zero biases put pre-activations exactly on the rectifier kink
    g = _gen(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("bias"):
                p.copy_(torch.rand(p.shape, generator=g, dtype=p.dtype) - 0.5)


def _grad_check(module, inputs):
    module = module.double()
    _randomize_biases(module)
    params = [p for p in module.parameters()]
    leaves = [x.detach().clone().double().requires_grad_(True) for x in inputs]
    weights = None

    def scalar():
        out = module(*leaves)
        outs = out if isinstance(out, tuple) else (out,)
        nonlocal weights
        if weights is None:
            g = _gen(99)
            weights = [torch.randn(o.shape, generator=g, dtype=torch.float64) for o in outs]
        return sum((o * w).sum() for o, w in zip(outs, weights))

    targets = params + leaves
    analytic = torch.autograd.grad(scalar(), targets)
    numeric = central_difference_grad(scalar, [t.data for t in targets])
    for a, n in zip(analytic, numeric):
        assert relative_error(a, n) < 1e-4


def test_box_head_gradients():
    head = BoxHead(2, 2, roi_size=3, hidden=6)
    init_parameters(head, _gen(1))
    _grad_check(head, [torch.randn(2, 2, 3, 3, generator=_gen(2))])


def test_mask_head_gradients():
    head = MaskHead(2, 2, width=3)
    init_parameters(head, _gen(1))
    _grad_check(head, [torch.randn(2, 2, 4, 4, generator=_gen(2))])


@pytest.mark.parametrize("ups", [1, 2])
def test_keypoint_head_gradients(ups):
    head = KeypointHead(2, 3, width=3, upsamples=ups)
    init_parameters(head, _gen(1))
    _grad_check(head, [torch.randn(1, 2, 3, 3, generator=_gen(2))])


def _fusion_inputs(cfg, n=4, C=2, R=2, seed=5):
    kp_size = n if cfg.design == "d" else 2 * n
    g = _gen(seed)
    kp = torch.randn(R, cfg.channels, kp_size, kp_size, generator=g)
    fm = torch.randn(R, C, n, n, generator=g)
    return kp, fm


@pytest.mark.parametrize("design, reduction, mode", VARIANTS)
def test_fusion_gradients(design, reduction, mode):
    cfg = FusionConfig(design=design, reduction=reduction, mode=mode, k=2)
    module = Fusion(cfg, 2)
    init_parameters(module, _gen(7))
    kp, fm = _fusion_inputs(cfg)
    _grad_check(module, [kp, fm])


def test_full_model_total_loss_gradient():
    from maskpoint.losses import loss_box, loss_cls, loss_keypoint, loss_mask

    fc = FusionConfig(k=2)
    cfg = ModelConfig(num_classes=2, features=3, backbone_width=2, mask_width=2, keypoint_width=2, box_hidden=4,
                      roi_size=2, fusion=fc)
    model = MaskPointRCNN(cfg, seed=3).double()
    _randomize_biases(model)
    g = _gen(11)
    image = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64)
    boxes = torch.tensor([[0.5, 1.0, 6.0, 5.5], [2.0, 2.0, 4.0, 4.0]], dtype=torch.float64)
    cls_t = torch.tensor([1, 2])
    box_t = torch.randn(2, 4, generator=g, dtype=torch.float64)
    mask_t = (torch.rand(1, 4, 4, generator=g) > 0.5).double()
    kp_t = torch.zeros(1, 3, 8, 8)
    kp_t[0, 0, 1, 2] = kp_t[0, 1, 5, 5] = kp_t[0, 2, 7, 0] = 1

    def scalar():
        out = model(image, boxes, mask_rois=torch.tensor([True, False]))
        return (loss_cls(out.class_logits, cls_t) + loss_box(out.box_deltas, box_t, cls_t)
                + loss_mask(out.fused_mask_logits, mask_t, cls_t[:1]) + 0.5 * loss_keypoint(out.keypoint_logits, kp_t))

    params = list(model.parameters())
    analytic = torch.autograd.grad(scalar(), params)
    numeric = central_difference_grad(scalar, [p.data for p in params])
    for a, n in zip(analytic, numeric):
        assert relative_error(a, n) < 1e-4


# fusion structure

@pytest.mark.parametrize("design, reduction, mode", list(itertools.product(DESIGNS, REDUCTIONS, MODES)))
def test_fusion_shape_matrix(design, reduction, mode):
    fc = FusionConfig(design=design, reduction=reduction, mode=mode, k=4)
    model = MaskPointRCNN(ModelConfig(num_classes=3, features=8, backbone_width=4, mask_width=4, keypoint_width=4,
                                      box_hidden=8, fusion=fc))
    out = model(torch.rand(1, 3, 32, 32), [[2.0, 3.0, 20.0, 18.0]])
    M = 28 if design == "d" else 56
    N = 56 if design == "c" else 28
    assert out.keypoint_logits.shape == (1, 5, M, M)
    assert out.mask_logits.shape == (1, 3, 28, 28)
    assert out.fused_mask_logits.shape == (1, 3, N, N)
    assert out.keypoint_sum.shape == (1, 1, N, N)
    assert torch.isfinite(out.fused_mask_logits).all()


def test_design_c_optional_downsample():
    fc = FusionConfig(design="c", k=2, downsample_c_output=True)
    module = Fusion(fc, 2)
    init_parameters(module, _gen())
    fused, _ = module(torch.rand(1, 3, 56, 56), torch.rand(1, 2, 28, 28))
    assert fused.shape == (1, 2, 28, 28)
    assert fc.mask_out_size == 28


def test_fusion_shape_errors():
    fc = FusionConfig(design="d", k=2)
    with pytest.raises(ShapeError):
        fuse(torch.rand(1, 4, 28, 28), torch.rand(1, 2, 28, 28), fc)
    with pytest.raises(ShapeError):
        fuse(torch.rand(1, 3, 56, 56), torch.rand(1, 2, 28, 28), fc)


def test_multiply_identity():
    # design d, single channel of ones: O_k == 1
    fc = FusionConfig(design="d", mode="multiply", k=1, use_center=False)
    fm = torch.randn(2, 3, 28, 28, generator=_gen())
    fused, o_k = fuse(torch.ones(2, 1, 28, 28), fm, fc)
    assert o_k.eq(1).all()
    assert torch.equal(fused, fm)


def test_add_identity_with_avgpool():
    fc = FusionConfig(design="b", reduction="avgpool", mode="add", k=3)
    fm = torch.randn(2, 3, 28, 28, generator=_gen())
    fused, _ = fuse(torch.zeros(2, 4, 56, 56), fm, fc)
    assert torch.equal(fused, fm)


def test_max_idempotent():
    fc = FusionConfig(design="d", mode="max", k=1, use_center=False)
    fm = torch.randn(1, 1, 28, 28, generator=_gen())
    fused, _ = fuse(fm.clone(), fm, fc)
    assert torch.equal(fused, fm)


def test_design_b_maxpool_hand_example():
    kp = torch.tensor([[
        [[1.0, 2.0, 0.0, -1.0], [3.0, 0.5, 4.0, 2.0], [-2.0, -3.0, 1.0, 1.0], [0.0, -1.0, 1.5, 0.0]],
        [[0.0, 0.0, 1.0, 1.0], [0.0, 5.0, 1.0, 2.0], [1.0, 1.0, -1.0, -2.0], [1.0, 2.0, -3.0, -4.0]],
    ]])
    fm = torch.tensor([[[[1.0, -2.0], [0.5, 3.0]]]])
    # hand-pooled windows: ch0 [[3, 4], [0, 1.5]], ch1 [[5, 2], [2, -1]] -> sum [[8, 6], [2, 0.5]]
    o_k = torch.tensor([[[[8.0, 6.0], [2.0, 0.5]]]])
    expected = {"multiply": o_k * fm, "add": o_k + fm, "max": torch.maximum(o_k, fm)}
    for mode, want in expected.items():
        fc = FusionConfig(design="b", reduction="maxpool", mode=mode, k=1)
        fused, got_ok = fuse(kp, fm, fc)
        assert torch.equal(got_ok, o_k)
        assert torch.equal(fused, want)
    assert expected["multiply"].tolist() == [[[[8.0, -12.0], [1.0, 1.5]]]]


@pytest.mark.parametrize("s", [2.0, 0.5, -4.0, 0.0])
def test_multiply_broadcast_scaling(s):
    fc = FusionConfig(design="d", mode="multiply", k=3)
    kp = torch.randn(2, 4, 28, 28, generator=_gen(1))
    fm = torch.randn(2, 3, 28, 28, generator=_gen(2))
    base, o_k = fuse(kp, fm, fc)
    scaled, o_k2 = fuse(kp * s, fm, fc)
    assert torch.equal(o_k2, o_k * s)
    assert torch.equal(scaled, base * s)


def test_strided_reduction_can_go_negative():
    fc = FusionConfig(design="b", reduction="strided_conv", mode="add", k=1)
    module = Fusion(fc, 1)
    with torch.no_grad():
        module.reduce.weight.fill_(-1.0)
        module.reduce.bias.zero_()
    _, o_k = module(torch.rand(1, 2, 56, 56) + 0.1, torch.zeros(1, 1, 28, 28))
    assert (o_k < 0).all()


def test_parametric_variants_need_module():
    with pytest.raises(ValueError):
        fuse(torch.rand(1, 3, 56, 56), torch.rand(1, 2, 28, 28), FusionConfig(k=2))


def test_fusion_config_validation():
    with pytest.raises(ValueError):
        FusionConfig(design="e")
    with pytest.raises(ValueError):
        FusionConfig(alpha=-1)
    d = FusionConfig()
    assert (d.design, d.reduction, d.mode, d.k, d.use_center, d.alpha) == ("b", "strided_conv", "multiply", 100, True, 0.5)


# whole model

def _small_config(**fusion):
    return ModelConfig(num_classes=3, features=8, backbone_width=4, mask_width=4, keypoint_width=4, box_hidden=8,
                       fusion=FusionConfig(k=4, **fusion))


def test_model_determinism_and_seeded_init():
    a, b = MaskPointRCNN(_small_config(), seed=4), MaskPointRCNN(_small_config(), seed=4)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    x = torch.rand(1, 3, 32, 32, generator=_gen())
    boxes = [[1.0, 1.0, 20.0, 25.0]]
    o1, o2 = a(x, boxes), a(x, boxes)
    assert torch.equal(o1.fused_mask_logits, o2.fused_mask_logits)
    assert torch.equal(o1.keypoint_logits, o2.keypoint_logits)


def test_mask_only_model_shares_initialization():
    full = MaskPointRCNN(_small_config(), seed=2)
    cfg = _small_config()
    cfg.keypoint = False
    plain = MaskPointRCNN(cfg, seed=2)
    shared = dict(plain.named_parameters())
    for name, p in full.named_parameters():
        if name in shared:
            assert torch.equal(p, shared[name])


def test_checkpoint_round_trip(tmp_path):
    model = MaskPointRCNN(_small_config(), seed=9)
    path = save_checkpoint(model, tmp_path / "m.ckpt")
    raw = path.read_bytes()
    assert raw.startswith(MAGIC)
    _, blocks = read_blocks(path)
    assert set(blocks) == set(model.state_dict())
    back = load_checkpoint(path)
    for (n1, p1), (n2, p2) in zip(model.state_dict().items(), back.state_dict().items()):
        assert n1 == n2 and torch.equal(p1, p2)
    x = torch.rand(1, 3, 32, 32, generator=_gen())
    assert torch.equal(model(x, [[0, 0, 16, 16]]).fused_mask_logits, back(x, [[0, 0, 16, 16]]).fused_mask_logits)


def test_checkpoint_rejects_other_config_and_garbage(tmp_path):
    path = save_checkpoint(MaskPointRCNN(_small_config(), seed=1), tmp_path / "m.ckpt")
    with pytest.raises(FormatError):
        load_checkpoint(path, MaskPointRCNN(_small_config(mode="add")))
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + bytes(40))
    with pytest.raises(FormatError):
        read_blocks(bad)
    bad.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(FormatError):
        read_blocks(bad)
