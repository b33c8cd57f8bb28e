import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from s3nas import tensorcore as tc
from s3nas.cost import (ModelShape, ResourceBudget, attention_macs, flop_count, param_count,
                        within_budget)
from s3nas.space import (Architecture, Block, DimensionKind as K, InvalidArchitecture, Stage,
                         enumerate_architectures, sample_uniform, uniform_space)
from s3nas.supernet import Network

from conftest import TOY_SHAPE, toy_space

SHAPE16 = ModelShape(side=16, channels=1, patch=2, classes=3)


def hand_arch() -> Architecture:
    s = Stage(8, 2.0, (Block(2, 2, 8),))
    return Architecture((s, s, s, Stage(8, 2.0, (Block(1, 2, 8),))))


def test_param_count_hand_sum():
    # patch 40, three w=2 blocks of 618, one w=1 block of 602, three merges of 328, head 43
    assert param_count(hand_arch(), SHAPE16) == 40 + 3 * 618 + 602 + 3 * 328 + 43 == 3523


def test_flop_count_hand_sum():
    # patch 2048, blocks 576 MACs per token (w=2) and 528 for the single w=1 token,
    # merges 256 per output token, classifier 24
    assert flop_count(hand_arch(), SHAPE16) == 2048 + 576 * 84 + 528 + 256 * 21 + 24 == 56360


def test_hand_arch_matches_allocated_weights_and_counter():
    net = Network.initialize(hand_arch(), SHAPE16, 0)
    assert net.num_weights() == 3523
    x = np.zeros((1, 1, 16, 16), dtype=np.float32)
    with tc.no_grad(), tc.count_macs() as macs:
        net.forward(x)
    assert macs[0] == 56360


def test_window_must_divide_side():
    s = Stage(8, 1.0, (Block(4, 1, 8),))
    arch = Architecture((s, s, s, s))  # stage 4 side is 1
    with pytest.raises(InvalidArchitecture):
        param_count(arch, SHAPE16)
    with pytest.raises(InvalidArchitecture):
        flop_count(arch, SHAPE16)


def test_empty_stage_is_invalid():
    with pytest.raises(InvalidArchitecture):
        Architecture((Stage(8, 1.0, ()),) * 4)


def test_extra_class_adds_head_row():
    a = hand_arch()
    more = dataclasses.replace(SHAPE16, classes=5)
    assert param_count(a, more) - param_count(a, SHAPE16) == 2 * (8 + 1)


def test_single_window_scores_collapse():
    t = 16
    assert attention_macs(t, 4, 8) == 2 * t * t * 8


@pytest.mark.parametrize("w", [1, 2, 4])
def test_attention_macs_scale_with_window_area(w):
    t, q = 64, 8
    assert attention_macs(t, 2 * w, q) == 4 * attention_macs(t, w, q)
    assert attention_macs(t, w, q) == 2 * t * w * w * q


def test_model_shape_checks():
    with pytest.raises(ValueError):
        ModelShape(side=30, patch=4)
    with pytest.raises(ValueError):
        ModelShape(side=12, patch=2)  # 6 tokens cannot be halved three times


def test_within_budget_unbounded_and_boundary():
    a = hand_arch()
    assert within_budget(a, None, ResourceBudget())
    p, f = param_count(a, SHAPE16), flop_count(a, SHAPE16)
    assert not within_budget(a, SHAPE16, ResourceBudget(max_params=p))
    assert within_budget(a, SHAPE16, ResourceBudget(max_params=p + 1))
    assert not within_budget(a, SHAPE16, ResourceBudget(max_flops=f))
    assert within_budget(a, SHAPE16, ResourceBudget(p + 1, f + 1))
    with pytest.raises(ValueError):
        within_budget(a, None, ResourceBudget(max_params=10))


def test_within_budget_matches_brute_force_filter():
    base = toy_space()
    narrow = [dataclasses.replace(base.get(k, i), choices=base.choices(k, i)[:1])
              for i in (2, 3, 4) for k in K]
    space = base.replace(*narrow)
    archs = list(enumerate_architectures(space))
    params = sorted(param_count(a, TOY_SHAPE) for a in archs)
    cap = params[len(params) // 2]
    budget = ResourceBudget(max_params=cap)
    assert sum(within_budget(a, TOY_SHAPE, budget) for a in archs) == sum(p < cap for p in params)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_counts_equal_allocation_and_counter(seed):
    arch = sample_uniform(toy_space(), np.random.default_rng(seed))
    net = Network.initialize(arch, TOY_SHAPE, seed)
    assert param_count(arch, TOY_SHAPE) == net.num_weights()
    with tc.no_grad(), tc.count_macs() as macs:
        net.forward(np.zeros((1, 1, 16, 16), dtype=np.float32))
    assert flop_count(arch, TOY_SHAPE) == macs[0]


def _bump(arch: Architecture, stage: int, what: str) -> Architecture | None:
    st_ = arch.stages[stage - 1]
    if what == "depth":
        new = Stage(st_.embed_dim, st_.mlp_ratio, st_.blocks + st_.blocks[-1:])
    elif what == "embed":
        new = Stage(st_.embed_dim + 4, st_.mlp_ratio, st_.blocks)
    elif what == "mlp":
        new = Stage(st_.embed_dim, st_.mlp_ratio + 0.5, st_.blocks)
    else:
        b = st_.blocks[0]
        new = Stage(st_.embed_dim, st_.mlp_ratio, (Block(b.window, b.heads, b.qkv * 2),) + st_.blocks[1:])
    stages = list(arch.stages)
    stages[stage - 1] = new
    return Architecture(tuple(stages))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 4), st.sampled_from(["depth", "embed", "mlp", "qkv"]))
def test_counts_monotone(seed, stage, what):
    arch = sample_uniform(toy_space(), np.random.default_rng(seed))
    bigger = _bump(arch, stage, what)
    assert param_count(bigger, TOY_SHAPE) >= param_count(arch, TOY_SHAPE)
    assert flop_count(bigger, TOY_SHAPE) >= flop_count(arch, TOY_SHAPE)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 10 ** 6), st.integers(0, 10 ** 5))
def test_within_budget_antitone(seed, cap, cut):
    arch = sample_uniform(toy_space(), np.random.default_rng(seed))
    loose, tight = ResourceBudget(max_params=cap + cut), ResourceBudget(max_params=cap)
    if within_budget(arch, TOY_SHAPE, tight):
        assert within_budget(arch, TOY_SHAPE, loose)


def test_uniform_space_helper_used_by_budget_examples():
    s = uniform_space((1,), (8,), (1,), (1,), (1,), (4,))
    a = next(enumerate_architectures(s))
    assert param_count(a, TOY_SHAPE) > 0
