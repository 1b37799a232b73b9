import math

import numpy as np
import pytest

from modal_distill import tensor as T
from modal_distill.data import SyntheticSpec, generate_synthetic
from modal_distill.errors import AlignmentError, ConfigError, DataError
from modal_distill.networks import (
    TEACHER_FOR_CONFIG,
    ModalityDims,
    NetworkConfig,
    TransformerId,
    build_student,
    build_teacher,
    closed_form_param_count,
    component_param_counts,
    pair_map,
    param_count,
    student_strides,
)


def tid(text):
    return TransformerId.parse(text)


@pytest.fixture(scope="module")
def batch():
    return generate_synthetic(SyntheticSpec(n=3, seed=0)).batch(np.arange(3))


# construction ---------------------------------------------------------------


@pytest.mark.parametrize("branch,count", [("complete", 9), ("video", 3), ("audio", 3), ("language", 3)])
def test_teacher_stack_counts(branch, count):
    assert len(build_teacher(branch, NetworkConfig.desk(), 0).all_ids) == count


@pytest.mark.parametrize("config,count", [(1, 9), (2, 3), (3, 3), (4, 3), (5, 3)])
def test_student_stack_counts(config, count):
    assert len(build_student(config, NetworkConfig.desk(), 0).all_ids) == count


def test_video_branch_stacks():
    net = build_teacher("video", NetworkConfig.desk(), 0)
    assert {str(i) for i in net.all_ids} == {"A_T<-V_T", "L_T<-V_T", "F[V_T]"}


def test_config5_student_stacks():
    net = build_student(5, NetworkConfig.desk(), 0)
    assert {str(i) for i in net.all_ids} == {"V_S<-V_S", "V_S<-L_S", "V_S<-A_S"}


@pytest.mark.parametrize(
    "config,stacks",
    [
        (2, {"V_S<-V_S", "A_S<-V_S", "L_S<-V_S"}),
        (3, {"V_S<-V_S", "V_S<-L_S", "A_S<-L_S"}),
        (4, {"V_S<-V_S", "V_S<-A_S", "L_S<-A_S"}),
    ],
)
def test_other_student_stacks(config, stacks):
    assert {str(i) for i in build_student(config, NetworkConfig.desk(), 0).all_ids} == stacks


def test_config1_student_mirrors_complete_teacher():
    s = build_student(1, NetworkConfig.desk(), 0)
    t = build_teacher("complete", NetworkConfig.desk(), 0)
    assert [i.on("T") for i in s.all_ids] == t.all_ids


def test_same_seed_bit_identical():
    a = build_teacher("complete", NetworkConfig.desk(), 7).named_parameters()
    b = build_teacher("complete", NetworkConfig.desk(), 7).named_parameters()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)


def test_invalid_ids_rejected():
    with pytest.raises(ConfigError):
        build_student(6, NetworkConfig.desk(), 0)
    with pytest.raises(ConfigError):
        build_teacher("smell", NetworkConfig.desk(), 0)
    with pytest.raises(ConfigError):
        NetworkConfig(d_model=16, n_heads=3)
    with pytest.raises(ConfigError):
        NetworkConfig(dims={"V": ModalityDims(0, 3), "A": ModalityDims(2, 2), "L": ModalityDims(2, 2)})


def test_transformer_id_text_roundtrip():
    for text in ("V_T<-A_T", "A_S<-L_S", "F[L_T]"):
        assert str(tid(text)) == text
    i = tid("V_T<-A_T")
    assert (i.kv, i.query) == ("V", "A")


# pair maps --------------------------------------------------------------------


EXPECTED_PAIRS = {
    2: {("A_S<-V_S", "A_T<-V_T"), ("L_S<-V_S", "L_T<-V_T")},
    3: {("V_S<-L_S", "V_T<-L_T"), ("A_S<-L_S", "A_T<-L_T")},
    4: {("V_S<-A_S", "V_T<-A_T"), ("L_S<-A_S", "L_T<-A_T")},
    5: {("V_S<-A_S", "V_T<-A_T"), ("V_S<-L_S", "V_T<-L_T")},
}


@pytest.mark.parametrize("config", [2, 3, 4, 5])
def test_pair_map_matches_table(config):
    assert {(str(s), str(t)) for s, t in pair_map(config)} == EXPECTED_PAIRS[config]


def test_pair_map_config1_has_nine_identical_pairs():
    pairs = pair_map(1)
    assert len(pairs) == 9
    assert all(s.on("T") == t for s, t in pairs)
    assert [t for _, t in pairs] == build_teacher("complete", NetworkConfig.desk(), 0).all_ids


@pytest.mark.parametrize("config", [1, 2, 3, 4, 5])
def test_pairs_match_roles_and_exist(config):
    cfg = NetworkConfig.desk()
    s_ids = build_student(config, cfg, 0).all_ids
    t_ids = build_teacher(TEACHER_FOR_CONFIG[config], cfg, 0).all_ids
    for s, t in pair_map(config):
        assert (s.kv, s.query, s.fusion) == (t.kv, t.query, t.fusion)
        assert s in s_ids and t in t_ids
        if config > 1:
            assert str(s) != "V_S<-V_S"


def test_pair_map_invalid():
    with pytest.raises(ConfigError):
        pair_map(0)


# forward ----------------------------------------------------------------------


def test_forward_shapes_and_finite(batch):
    for net in (build_teacher("complete", NetworkConfig.desk(), 0), build_student(5, NetworkConfig.desk(), 0)):
        out = net(batch)
        assert out.logits.shape == (3, 7)
        assert np.isfinite(out.logits.data).all()
        assert set(out.traces) == set(net.all_ids)
        assert out.penultimate_feat.shape[0] == 3


def test_arrow_convention_map_shapes(batch):
    cfg = NetworkConfig.desk()
    out = build_teacher("complete", cfg, 0)(batch)
    t = {m: cfg.dims[m].length for m in "VAL"}
    for i, trace in out.traces.items():
        rows, cols = (t[i.query], t[i.query]) if i.fusion else (t[i.query], t[i.kv])
        assert all(m.shape == (3, rows, cols) for m in trace.maps), str(i)
    assert out.traces[tid("V_T<-A_T")].maps[0].shape == (3, 12, 24)


def test_s_down_student_shapes_align_with_teacher(batch):
    cfg = NetworkConfig.desk()
    assert student_strides(cfg) == {"V": 1, "A": 2, "L": 4}
    s = build_student(5, cfg, 0)(batch)
    t = build_teacher("complete", cfg, 0)(batch)
    for sid, teid in pair_map(5):
        assert s.traces[sid].maps[0].shape == t.traces[teid].maps[0].shape


def test_t_up_student_keeps_full_length(batch):
    out = build_student(5, NetworkConfig.desk(), 0, alignment="T_up")(batch)
    assert out.traces[tid("V_S<-A_S")].maps[0].shape == (3, 24, 24)


def test_s_down_needs_integer_ratio():
    cfg = NetworkConfig(dims={"V": ModalityDims(10, 4), "A": ModalityDims(4, 4), "L": ModalityDims(5, 4)})
    with pytest.raises(AlignmentError, match="10.*4"):
        build_student(5, cfg, 0)


def test_missing_modality_named(batch):
    net = build_teacher("complete", NetworkConfig.desk(), 0)
    with pytest.raises(DataError, match="audio"):
        net({k: v for k, v in batch.items() if k != "A"})


def test_zero_head_gives_log7(batch):
    net = build_student(5, NetworkConfig.desk(), 0)
    net.head_out.weight.data[...] = 0
    net.head_out.bias.data[...] = 0
    loss = T.cross_entropy_logits(net(batch).logits, np.array([0, 3, 6]))
    assert loss.item() == pytest.approx(math.log(7), abs=1e-6)


def test_forward_deterministic(batch):
    net = build_teacher("audio", NetworkConfig.desk(), 3)
    np.testing.assert_array_equal(net(batch).logits.data, net(batch).logits.data)


def test_student_ignores_non_video_inputs(batch):
    net = build_student(5, NetworkConfig.desk(), 0)
    a = net(batch).logits.data
    b = net({"V": batch["V"]}).logits.data
    np.testing.assert_array_equal(a, b)


# parameter counts ---------------------------------------------------------------


@pytest.mark.parametrize(
    "build",
    [
        lambda c: build_teacher("complete", c, 0),
        lambda c: build_teacher("language", c, 0),
        lambda c: build_student(1, c, 0),
        lambda c: build_student(5, c, 0),
    ],
)
@pytest.mark.parametrize("preset", ["desk", "paper"])
def test_closed_form_matches_actual(build, preset):
    net = build(NetworkConfig.preset(preset))
    closed = closed_form_param_count(net)
    assert closed == component_param_counts(net)
    assert sum(closed.values()) == param_count(net)


def test_teacher_larger_than_student_and_ratio():
    for cfg in (NetworkConfig.desk(), NetworkConfig.paper()):
        ratio = param_count(build_teacher("complete", cfg, 0)) / param_count(build_student(5, cfg, 0))
        assert ratio >= 2.0


def test_more_layers_more_params():
    counts = [param_count(build_student(5, NetworkConfig.desk(n_layers=l), 0)) for l in (1, 2, 4)]
    assert counts[0] < counts[1] < counts[2]
    stack = [closed_form_param_count(build_student(5, NetworkConfig.desk(n_layers=l), 0))["stacks"] for l in (2, 4)]
    assert stack[1] == 2 * stack[0]


def test_config_dict_roundtrip():
    cfg = NetworkConfig.paper()
    assert NetworkConfig.from_dict(cfg.to_dict()) == cfg
