import copy

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from esdnet.branches import (
    EnsembleModel,
    InferenceModel,
    TopologyConfig,
    build_baseline,
    build_ensemble,
    build_v1,
    build_v2,
    ensemble_logits,
    forward_all,
    prune_to_main,
)
from esdnet.errors import ConfigError, TopologyError
from esdnet.nn import Conv2d, Linear, Sequential, get_preset
from esdnet.nn.backbones import BackboneSpec, StageSpec, build_backbone
from esdnet.tensor import Tensor, no_grad, profile

# conv + 4 layers, small enough to run in milliseconds
FOUR_LAYER = BackboneSpec(
    name="four", block="basic", stem_channels=4, image_size=16, num_classes=5,
    stages=(StageSpec(1, 4, 1), StageSpec(1, 8, 2), StageSpec(1, 8, 2), StageSpec(1, 8, 1)),
)


def batch(shape=(3, 3, 16, 16), seed=0):
    return Tensor(np.random.default_rng(seed).standard_normal(shape).astype(np.float32))


def run_seq(modules, x):
    with no_grad():
        return Sequential(*[copy.deepcopy(m) for m in modules]).eval()(x).data


# -- v1 --------------------------------------------------------------------------------


def test_v1_four_branches_follow_zigzag_layout():
    model = build_ensemble(FOUR_LAYER, TopologyConfig("v1", [0, 1, 2], ["none"]), np.random.default_rng(0))
    assert model.num_branches == 4
    assert model.branch_paths() == [
        ["conv", "main-layer1", "main-layer2", "main-layer3", "main-layer4", "main-fc"],
        ["conv", "sub-layer1", "sub-layer2", "sub-layer3", "sub-layer4", "sub-fc1"],
        ["conv", "main-layer1", "sub-layer2", "sub-layer3", "sub-layer4", "sub-fc2"],
        ["conv", "main-layer1", "main-layer2", "sub-layer3", "sub-layer4", "sub-fc3"],
    ]


def test_v1_default_split_points_and_attention_tags():
    model = build_ensemble(FOUR_LAYER, TopologyConfig("v1"), np.random.default_rng(0))
    assert model.topology.split_points == [0, 1, 2]
    assert model.branch_paths()[1][1] == "sub-layer1[dropout:0.2]"


def test_v1_every_route_equals_hand_composition():
    model = build_ensemble(FOUR_LAYER, TopologyConfig("v1", [0, 1, 2], ["se"]), np.random.default_rng(1)).eval()
    x = batch()
    with no_grad():
        out = model.forward_all(x)
    main = list(model.main)
    assert np.array_equal(out.logits[0].data, run_seq(main + [model.head], x))
    for j, k in enumerate([0, 1, 2]):
        hand = main[: k + 1] + list(model.sub)[k:] + [model.sub_heads[j]]
        np.testing.assert_array_equal(out.logits[j + 1].data, run_seq(hand, x))


def test_v1_last_split_point_two_branches():
    spec = get_preset("tiny", 4)
    m = spec.num_blocks - 1
    model = build_ensemble(spec, TopologyConfig("v1", [m - 1], ["none"]), np.random.default_rng(2)).eval()
    assert model.num_branches == 2
    x = batch((2, 3, 32, 32))
    with no_grad():
        out = model.forward_all(x)
    main = list(model.main)
    np.testing.assert_array_equal(out.logits[0].data, run_seq(main + [model.head], x))
    np.testing.assert_array_equal(out.logits[1].data, run_seq(main[:m] + [model.sub[m - 1], model.sub_heads[0]], x))


def test_v1_empty_split_points_is_baseline():
    rng = np.random.default_rng(3)
    model = build_ensemble(FOUR_LAYER, TopologyConfig("v1", [], ["none"]), rng).eval()
    assert model.num_branches == 1
    blocks, head = build_backbone(FOUR_LAYER, np.random.default_rng(3))
    x = batch()
    with no_grad():
        np.testing.assert_array_equal(model.forward_all(x).logits[0].data,
                                      InferenceModel(blocks, head).eval()(x).data)


def test_v1_with_copied_weights_all_branches_agree():
    blocks, head = build_backbone(FOUR_LAYER, np.random.default_rng(4))
    subs = [copy.deepcopy(b) for b in blocks[1:]]
    heads = [copy.deepcopy(head) for _ in range(3)]
    model = build_v1(blocks, head, subs, heads, [0, 1, 2], (3, 16, 16)).eval()
    with no_grad():
        logits = [v.data for v in model.forward_all(batch()).logits]
    for v in logits[1:]:
        np.testing.assert_allclose(v, logits[0], rtol=0, atol=0)


def test_v1_shared_sub_blocks_are_single_objects():
    model = build_ensemble(FOUR_LAYER, TopologyConfig("v1", [0, 1, 2]), np.random.default_rng(0))
    last = [r.suffix[-1] for r in model.routes[1:]]
    assert all(b is last[0] for b in last)


def test_trunk_is_evaluated_once():
    """conv calls == main convs + convs in each branch suffix; f0 is not recomputed."""
    model = build_ensemble(FOUR_LAYER, TopologyConfig("v1", [0, 1, 2], ["none"]), np.random.default_rng(5)).eval()

    def convs(m):
        return sum(isinstance(mod, Conv2d) for _, mod in m.named_modules())

    expected = sum(convs(f) for f in model.main)
    expected += sum(convs(g) for k in [0, 1, 2] for g in list(model.sub)[k:])
    with no_grad(), profile() as prof:
        model.forward_all(batch())
    assert prof.calls["conv2d"] == expected
    assert prof.calls["linear"] == 4
    # the naive schedule would recompute the stem (1 conv) for each of the 3 extra branches
    assert expected < expected + 3 * convs(model.main[0])


@pytest.mark.parametrize("sp", [[-1], [4], [1, 1], [2, 0]])
def test_v1_invalid_split_points(sp):
    with pytest.raises(TopologyError):
        build_ensemble(FOUR_LAYER, TopologyConfig("v1", sp), np.random.default_rng(0))


@settings(max_examples=25, deadline=None)
@given(st.sets(st.integers(0, 2)))
def test_v1_branch_count_law(sp):
    model = build_ensemble(FOUR_LAYER, TopologyConfig("v1", sorted(sp), ["none"]), None)
    assert model.num_branches == len(sp) + 1


# -- v2 --------------------------------------------------------------------------------


def test_v2_three_attention_sub_branches():
    model = build_ensemble(FOUR_LAYER, TopologyConfig("v2", [2], ["se", "cam", "dropout:0.2"]), np.random.default_rng(0))
    assert model.num_branches == 4
    paths = model.branch_paths()
    assert paths[1] == ["conv", "main-layer1", "main-layer2", "sub1-layer3[se:4]", "sub1-layer4", "sub1-fc"]
    assert paths[2] == ["conv", "main-layer1", "main-layer2", "sub2-layer3[cam]", "sub2-layer4", "sub2-fc"]
    assert paths[3] == ["conv", "main-layer1", "main-layer2", "sub3-layer3[dropout:0.2]", "sub3-layer4", "sub3-fc"]


def test_v2_routes_equal_hand_composition():
    model = build_ensemble(FOUR_LAYER, TopologyConfig("v2", [2]), np.random.default_rng(6)).eval()
    x = batch()
    with no_grad():
        out = model.forward_all(x)
    trunk = list(model.main)[:3]
    for j in range(3):
        hand = trunk + list(model.branches[j]) + [model.branch_heads[j]]
        np.testing.assert_array_equal(out.logits[j + 1].data, run_seq(hand, x))


def test_v2_without_sub_branches_is_baseline():
    blocks, head = build_backbone(FOUR_LAYER, np.random.default_rng(7))
    model = build_v2(blocks, head, [], 2, (3, 16, 16)).eval()
    assert model.num_branches == 1
    with no_grad():
        np.testing.assert_array_equal(model.forward_all(batch()).logits[0].data,
                                      InferenceModel(blocks, head).eval()(batch()).data)


def test_v2_identical_sub_branches_agree():
    blocks, head = build_backbone(FOUR_LAYER, np.random.default_rng(8))
    body = [copy.deepcopy(b) for b in blocks[3:]]
    defs = [([copy.deepcopy(b) for b in body], copy.deepcopy(head)) for _ in range(2)]
    model = build_v2(blocks, head, defs, 2, (3, 16, 16)).eval()
    with no_grad():
        out = model.forward_all(batch())
    np.testing.assert_array_equal(out.logits[1].data, out.logits[2].data)


def test_v2_rejects_several_split_points():
    with pytest.raises(ConfigError):
        build_ensemble(FOUR_LAYER, TopologyConfig("v2", [1, 2]), None)


def test_v2_sub_branch_shape_mismatch():
    blocks, head = build_backbone(FOUR_LAYER, np.random.default_rng(0))
    with pytest.raises(TopologyError):
        build_v2(blocks, head, [([copy.deepcopy(blocks[4])], copy.deepcopy(head))], 1, (3, 16, 16))


# -- ensemble logits -------------------------------------------------------------------


class _Out:
    def __init__(self, logits):
        self.logits = [Tensor(np.asarray(v, np.float32)) for v in logits]


def test_ensemble_logits_symmetric_pair():
    np.testing.assert_array_equal(ensemble_logits(_Out([[[1, 3]], [[3, 1]]])).data, [[2, 2]])


def test_ensemble_logits_identical_branches():
    v = np.random.default_rng(0).standard_normal((2, 5))
    np.testing.assert_allclose(ensemble_logits(_Out([v, v, v])).data, v.astype(np.float32), rtol=1e-7)


def test_ensemble_logits_summation_oracle():
    vs = np.random.default_rng(1).standard_normal((4, 3, 6)).astype(np.float32)
    ref = np.zeros((3, 6))
    for v in vs:
        ref += v.astype(np.float64)
    np.testing.assert_allclose(ensemble_logits(_Out(vs)).data, ref / 4, atol=1e-7)


# -- pruning ----------------------------------------------------------------------------


@pytest.mark.parametrize("topo", [TopologyConfig("v1"), TopologyConfig("v2"), TopologyConfig("v1", [1], ["cam"]),
                                  TopologyConfig("baseline")])
def test_prune_reproduces_main_logits(topo):
    model = build_ensemble(FOUR_LAYER, topo, np.random.default_rng(9))
    x = batch()
    with no_grad():
        full = forward_all(model, x, "eval").logits[0].data
        pruned = prune_to_main(model).eval()(x).data
    assert np.array_equal(full, pruned)
    assert prune_to_main(model).num_parameters() <= model.num_parameters()
    if model.num_branches > 1:
        assert prune_to_main(model).num_parameters() < model.num_parameters()


def test_pruned_state_has_no_sub_branch_names():
    model = build_ensemble(FOUR_LAYER, TopologyConfig("v1"), np.random.default_rng(0))
    names = list(prune_to_main(model).state_dict())
    assert names and all(n.startswith(("main.", "head.")) for n in names)
    full = list(model.state_dict())
    assert set(names) <= set(full)


def test_forward_all_rejects_bad_mode_and_input():
    model = build_ensemble(FOUR_LAYER, TopologyConfig("v1"), None)
    with pytest.raises(ConfigError):
        forward_all(model, batch(), "predict")
    with pytest.raises(TopologyError):
        model.forward_all(batch((2, 1, 16, 16)))


def test_baseline_builder_matches_model_type():
    blocks, head = build_backbone(FOUR_LAYER, None)
    assert isinstance(build_baseline(blocks, head, (3, 16, 16)), EnsembleModel)


def test_final_maps_share_shape():
    model = build_ensemble(FOUR_LAYER, TopologyConfig("v2"), np.random.default_rng(0))
    with no_grad():
        out = forward_all(model, batch(), "train", np.random.default_rng(1))
    assert len({m.shape for m in out.final_maps}) == 1
    assert all(isinstance(m, Tensor) for m in out.final_maps)
    assert model.head.body[-1].__class__ is Linear
