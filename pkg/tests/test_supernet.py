import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from s3nas import tensorcore as tc
from s3nas.cost import ModelShape
from s3nas.data import Dataset, generate_synthetic
from s3nas.space import (Architecture, Block, DimensionKind as K, Stage, Subspace, extreme_architecture,
                         sample_uniform, uniform_space)
from s3nas.supernet import (ElasticBounds, Network, OutOfBounds, Supernet, TrainConfig, WindowMismatch,
                            _subnet_spec, attention_stats, cosine_lr, evaluate, grid_distances,
                            mean_grid_distance, predict, retrain_standalone, sandwich_step,
                            topk_distances)

import gradcheck as gc
import reference
from conftest import TOY_SHAPE, toy_space


def scrambled(space, shape=TOY_SHAPE, seed=0, scale=0.3):
    """Supernet whose every weight (norm scales and biases included) is random."""
    bounds = ElasticBounds.from_space(space, shape)
    rng = np.random.default_rng(seed)
    weights = {k: (rng.standard_normal(v) * scale + (1.0 if k.endswith(".g") else 0.0)).astype(np.float32)
               for k, v in bounds.max_shapes().items()}
    return Supernet(bounds, weights=weights)


def images(n, shape=TOY_SHAPE, seed=0):
    return np.random.default_rng(seed).random((n, shape.channels, shape.side, shape.side)).astype(np.float32)


def test_max_arch_matches_loop_reference():
    space = toy_space()
    net = scrambled(space)
    arch = extreme_architecture(space, largest=True)
    x = images(2)
    got = net.forward(arch, x).data
    want = reference.forward(net.state_dict(), arch, TOY_SHAPE, x)
    assert np.max(np.abs(got - want)) < 1e-4


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_subnet_matches_loop_reference(seed):
    space = toy_space()
    net = scrambled(space, seed=seed)
    arch = sample_uniform(space, np.random.default_rng(seed))
    x = images(2, seed=seed)
    want = reference.forward(net.extract(arch).state_dict(), arch, TOY_SHAPE, x)
    assert np.max(np.abs(net.forward(arch, x).data - want)) < 1e-4


def test_slicing_equivalence_many_subnets():
    space = toy_space()
    net = scrambled(space, seed=5)
    rng = np.random.default_rng(5)
    x = images(4, seed=5)
    for _ in range(50):
        arch = sample_uniform(space, rng)
        a = net.forward(arch, x).data
        b = net.extract(arch).forward(x).data
        assert np.max(np.abs(a - b)) <= 1e-6


def test_unused_slots_do_not_matter():
    space = toy_space()
    net = scrambled(space, seed=7)
    arch = sample_uniform(space, np.random.default_rng(7))
    x = images(2, seed=7)
    before = net.forward(arch, x).data.copy()
    used = {}
    for name, idx, _ in _subnet_spec(arch, net.bounds):
        used[name] = idx
    rng = np.random.default_rng(8)
    for name, t in net.weights.items():
        noise = rng.standard_normal(t.shape).astype(np.float32)
        if name in used:
            keep = t.data[used[name]].copy()
            t.data += noise
            t.data[used[name]] = keep
        else:
            t.data += noise
    assert np.array_equal(net.forward(arch, x).data, before)


def test_max_arch_ignores_larger_bounds():
    """A bigger supernet holding the same leading weights gives the same logits."""
    space = toy_space()
    small = scrambled(space, seed=3)
    wide = space.replace(Subspace(K.DEPTH, 2, (1, 2, 3), 1), Subspace(K.EMBED_DIM, 1, (8, 12, 16), 4))
    big = Supernet.grown_from(small, ElasticBounds.from_space(wide, TOY_SHAPE), seed=11)
    arch = extreme_architecture(space, largest=True)
    x = images(2, seed=3)
    assert np.max(np.abs(big.forward(arch, x).data - small.forward(arch, x).data)) <= 1e-6


def test_relative_bias_slice_is_centered():
    space = uniform_space((1,), (8,), (1,), (1, 2, 4), (2,), (4,)).replace(
        *[Subspace(K.WINDOW_SIZE, i, (1, 2), 1) for i in (3, 4)])
    bounds = ElasticBounds.from_space(space, TOY_SHAPE)
    for w in (1, 2, 4):
        blk = Stage(8, 1.0, (Block(w, 2, 4),))
        tail = Stage(8, 1.0, (Block(1, 2, 4),))
        arch = Architecture((blk, blk, tail, tail))
        spec = {n: idx for n, idx, _ in _subnet_spec(arch, bounds)}
        rows, cols, heads = spec["s1.b1.relbias"]
        assert (rows.start, rows.stop) == (4 - w, 4 - w + 2 * w - 1)
        assert (cols.start, cols.stop) == (rows.start, rows.stop)
        # the zero-displacement entry stays at the centre
        assert rows.start + w - 1 == 4 - 1
        if w == 4:
            assert (rows.start, rows.stop) == (0, 7)


def test_gradients_stay_in_leading_slices():
    space = toy_space()
    net = scrambled(space, seed=2)
    arch = extreme_architecture(space, largest=False)
    assert arch.stages[0].embed_dim < net.bounds.embed_dim[0]
    x = images(3, seed=2)
    tc.cross_entropy(net.forward(arch, x), np.array([0, 1, 2])).backward()
    spec = {n: idx for n, idx, _ in _subnet_spec(arch, net.bounds)}
    for name, t in net.weights.items():
        g = t.grad if t.grad is not None else np.zeros(t.shape)
        mask = np.ones(t.shape, dtype=bool)
        if name in spec:
            mask[spec[name]] = False
        assert not np.any(g[mask]), name


def test_elastic_block_gradcheck():
    space = toy_space()
    bounds = ElasticBounds.from_space(space, TOY_SHAPE)
    rng = np.random.default_rng(0)
    arch = sample_uniform(space, rng)
    shapes = bounds.max_shapes()
    names = sorted(shapes)
    arrays = [rng.standard_normal(shapes[n]) * 0.3 + (1.0 if n.endswith(".g") else 0.0) for n in names]
    x = rng.random((2, 1, 16, 16))
    fn = gc.sliced_forward(names, arch, bounds, x, rng.standard_normal((2, TOY_SHAPE.classes)))
    assert gc.check(fn, arrays, rng, coords_per_input=2) <= gc.REL_TOL


def test_out_of_bounds_names_dimension():
    space = toy_space()
    net = Supernet.for_space(space, TOY_SHAPE, 0)
    ok = extreme_architecture(space, largest=True)
    st0 = ok.stages[0]
    wide = Architecture((Stage(16, st0.mlp_ratio, st0.blocks),) + ok.stages[1:])
    with pytest.raises(OutOfBounds, match="embed_dim"):
        net.forward(wide, images(1))
    deep = Architecture((Stage(st0.embed_dim, st0.mlp_ratio, st0.blocks * 2),) + ok.stages[1:])
    with pytest.raises(OutOfBounds, match="depth"):
        net.forward(deep, images(1))


def test_window_mismatch():
    space = toy_space().replace(Subspace(K.WINDOW_SIZE, 4, (1, 2), 1))
    net = Supernet.for_space(space, TOY_SHAPE, 0)
    arch = extreme_architecture(space, largest=True)  # stage 4 side is 1, window 2
    with pytest.raises(WindowMismatch):
        net.forward(arch, images(1))


def test_identical_images_identical_rows():
    space = toy_space()
    net = scrambled(space, seed=4)
    x = np.repeat(images(1, seed=4), 3, axis=0)
    out = net.forward(sample_uniform(space, np.random.default_rng(4)), x).data
    assert np.array_equal(out[0], out[1]) and np.array_equal(out[0], out[2])


def _singleton():
    return uniform_space((1,), (8,), (1,), (2,), (2,), (4,)).replace(Subspace(K.WINDOW_SIZE, 4, (1,), 1))


def test_sandwich_singleton_space_quadruples_gradient():
    space = _singleton()
    net = scrambled(space, seed=1)
    x, y = images(4, seed=1), np.array([0, 1, 2, 0])
    arch = extreme_architecture(space, largest=True)
    single = {}
    tc.cross_entropy(net.forward(arch, x), y).backward()
    for k, t in net.weights.items():
        single[k] = t.grad.copy()
        t.grad = None
    opt = tc.AdamW(net.parameters(), lr=0.0, weight_decay=0.0)
    before = {k: t.data.copy() for k, t in net.weights.items()}
    losses = sandwich_step(net, space, opt, x, y, np.random.default_rng(0), lr=0.0)
    assert len(losses) == 4 and len(set(losses)) == 1
    for k, t in net.weights.items():
        assert np.allclose(t.grad, 4 * single[k], rtol=1e-5, atol=1e-7)
        assert np.array_equal(t.data, before[k])


def test_sandwich_zero_lr_keeps_weights():
    space = toy_space()
    net = scrambled(space, seed=2)
    opt = tc.AdamW(net.parameters(), lr=0.0)
    before = {k: t.data.copy() for k, t in net.weights.items()}
    losses = sandwich_step(net, space, opt, images(4), np.array([0, 1, 2, 0]), np.random.default_rng(1), lr=0.0)
    assert all(math.isfinite(v) for v in losses)
    assert all(np.array_equal(t.data, before[k]) for k, t in net.weights.items())


def test_sandwich_step_is_one_update():
    space = toy_space()
    net = scrambled(space, seed=3)
    opt = tc.AdamW(net.parameters(), lr=1e-3)
    sandwich_step(net, space, opt, images(4), np.array([0, 1, 2, 0]), np.random.default_rng(1))
    assert opt.t == 1


def test_cosine_schedule_endpoints():
    assert cosine_lr(0, 100, 1e-3, 1e-5) == pytest.approx(1e-3)
    assert cosine_lr(99, 100, 1e-3, 1e-5) == pytest.approx(1e-5)
    assert cosine_lr(0, 1, 1e-3, 1e-5) == 1e-3


def _val(n=512, seed=3):
    _, val = generate_synthetic(seed, n_train=8, n_val=n, side=16, classes=TOY_SHAPE.classes)
    return val


def test_random_weights_error_near_chance():
    space = toy_space()
    net = Supernet.for_space(space, TOY_SHAPE, 0)
    val = _val()
    k = TOY_SHAPE.classes
    err = evaluate(net, extreme_architecture(space, largest=True), val)
    sigma = math.sqrt((1 / k) * (1 - 1 / k) / len(val))
    assert abs(err - (1 - 1 / k)) <= 3 * sigma


def test_error_zero_against_own_predictions_and_deterministic():
    space = toy_space()
    net = scrambled(space, seed=6)
    val = _val(64)
    arch = sample_uniform(space, np.random.default_rng(6))
    preds = predict(net, val.images, arch)
    mine = Dataset(val.images, preds, val.classes, "val") if len(set(preds)) == val.classes else None
    e1, e2 = evaluate(net, arch, val), evaluate(net, arch, val)
    assert e1 == e2
    if mine is None:  # a dataset needs every class present; compare counts directly
        assert np.count_nonzero(predict(net, val.images, arch) != preds) == 0
    else:
        assert evaluate(net, arch, mine) == 0.0


def test_argmax_ties_go_to_lowest_class():
    class Flat:
        def forward(self, x):
            return tc.Tensor(np.zeros((len(x), 3), dtype=np.float32))

    assert np.array_equal(predict(Flat(), np.zeros((5, 1, 16, 16))), np.zeros(5))


def test_retrain_zero_epochs_is_init_and_seeded():
    arch = sample_uniform(toy_space(), np.random.default_rng(0))
    tr, val = generate_synthetic(1, n_train=64, n_val=32, side=16, classes=TOY_SHAPE.classes)
    net0, err0 = retrain_standalone(arch, TOY_SHAPE, tr, val, 0, seed=9)
    init = Network.initialize(arch, TOY_SHAPE, int(np.random.SeedSequence(9).spawn(2)[0].generate_state(1)[0]))
    assert err0 == evaluate(init, None, val)
    cfg = TrainConfig(batch_size=16)
    a, ea = retrain_standalone(arch, TOY_SHAPE, tr, val, 1, seed=4, cfg=cfg)
    b, eb = retrain_standalone(arch, TOY_SHAPE, tr, val, 1, seed=4, cfg=cfg)
    assert ea == eb
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)


def test_supernet_save_load(tmp_path):
    space = toy_space()
    net = scrambled(space, seed=9)
    net.save(tmp_path / "n.ckpt")
    back = Supernet.load(tmp_path / "n.ckpt", net.bounds)
    arch = sample_uniform(space, np.random.default_rng(9))
    assert np.array_equal(back.forward(arch, images(2)).data, net.forward(arch, images(2)).data)


def test_grown_from_copies_shared_regions():
    space = toy_space()
    small = scrambled(space, seed=1)
    wide = space.replace(Subspace(K.WINDOW_SIZE, 1, (1, 2, 4), 1), Subspace(K.EMBED_DIM, 1, (8, 12, 16), 4))
    big = Supernet.grown_from(small, ElasticBounds.from_space(wide, TOY_SHAPE), seed=2)
    src, dst = small.weights["s1.b1.relbias"].data, big.weights["s1.b1.relbias"].data
    assert src.shape == (3, 3, 2) and dst.shape == (7, 7, 2)
    assert np.array_equal(dst[2:5, 2:5, :], src)
    assert np.array_equal(big.weights["patch.w"].data[:12], small.weights["patch.w"].data)


# -- attention statistics ----------------------------------------------------

@pytest.mark.parametrize("w", [1, 2, 3, 4, 7])
def test_grid_average_closed_form_vs_enumeration(w):
    cells = [(r, c) for r in range(w) for c in range(w)]
    pairs = [math.dist(a, b) for a in cells for b in cells if a != b]
    want = sum(pairs) / len(pairs) if pairs else 0.0
    assert abs(mean_grid_distance(w) - want) <= 1e-9


@pytest.mark.parametrize("w", [2, 3, 4])
def test_uniform_attention_all_keys_gives_grid_average(w):
    u = w * w
    attn = np.full((2, 3, u, u), 1.0 / u)
    d = topk_distances(attn, w, u - 1)
    assert abs(d.mean() - mean_grid_distance(w)) <= 1e-9


def test_window_one_distances_zero():
    assert np.all(topk_distances(np.ones((4, 1, 1)), 1, 3) == 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 30), st.integers(0, 2 ** 32 - 1))
def test_topk_distances_within_diameter(w, k, seed):
    u = w * w
    attn = np.random.default_rng(seed).random((3, u, u))
    d = topk_distances(attn, w, k)
    assert np.all(d >= 0) and np.all(d <= math.sqrt(2) * (w - 1) + 1e-12)


def test_topk_picks_most_attended_key():
    w = 3
    attn = np.zeros((9, 9))
    attn[0, 8] = 1.0  # corner to corner
    attn[4, 5] = 1.0  # centre to its right neighbour
    d = topk_distances(attn, w, 1)
    assert d[0] == pytest.approx(math.sqrt(8))
    assert d[4] == pytest.approx(1.0)
    assert grid_distances(w)[0, 8] == pytest.approx(math.sqrt(8))


def test_attention_stats_rows():
    space = toy_space()
    net = scrambled(space, seed=1)
    arch = extreme_architecture(space, largest=True)
    rows = attention_stats(net, arch, images(2), k=2)
    assert len(rows) == sum(s.depth for s in arch.stages)
    for r in rows:
        assert 0 <= r["mean"] <= math.sqrt(2) * (r["window"] - 1) + 1e-12
        assert r["median"] <= r["max"] <= math.sqrt(2) * (r["window"] - 1) + 1e-12
        if r["window"] == 1:
            assert r["mean"] == r["max"] == 0


def test_attention_stats_uniform_network():
    """Zero query/key weights and bias tables give uniform attention."""
    space = uniform_space((1,), (8,), (1,), (2,), (2,), (4,)).replace(Subspace(K.WINDOW_SIZE, 4, (1,), 1))
    net = scrambled(space, seed=0)
    for name, t in net.weights.items():
        if name.endswith("qkv.w") or name.endswith("qkv.b"):
            t.data[:8] = 0.0  # queries and keys (q=4 each)
        if name.endswith("relbias"):
            t.data[:] = 0.0
    rows = attention_stats(net, extreme_architecture(space, largest=True), images(2), k=3)
    for r in rows:
        if r["window"] == 2:
            assert abs(r["mean"] - mean_grid_distance(2)) <= 1e-9


@pytest.mark.slow
def test_toy_supernet_training_baseline():
    from s3nas.config import load_config
    from s3nas.pipeline import model_data
    from s3nas.supernet import train_supernet
    from pathlib import Path

    cfg = load_config(Path(__file__).parent.parent / "configs" / "toy_supernet.json")
    train, val = model_data(cfg)
    net = Supernet.for_space(cfg.space, cfg.shape, 0)
    train_supernet(net, cfg.space, train, TrainConfig(steps=300), seed=0)
    assert 1 - evaluate(net, extreme_architecture(cfg.space, True), val) >= 0.85
    assert 1 - evaluate(net, extreme_architecture(cfg.space, False), val) >= 0.70
