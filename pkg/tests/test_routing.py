"""Routing: Gumbel-sigmoid relaxation, normalization, skill combination,
grouping, and gradient flow through the routing logits."""
import numpy as np
import pytest

from skillroute.errors import ConfigurationError, RoutingError
from skillroute.routing import (EVAL_MODE, TRAIN_MODE, RoutingGroupMap,
                                RoutingState, TemperatureSchedule,
                                combine_mhr, combine_poly, normalize, relax,
                                resolve_site)
from skillroute.adapters import init_inventory
from skillroute.backbone import BackboneConfig, build_backbone
from skillroute.tensor import Tensor, concat_rows, slice_rows, tsum

from .helpers import gradcheck


def test_relax_eval_zero_is_half():
    out = relax(Tensor(np.zeros((3, 2))), EVAL_MODE, None, tau=1.0)
    assert np.allclose(out.data, 0.5)


def test_relax_eval_deterministic():
    z = Tensor(np.random.default_rng(0).normal(size=(4, 2)))
    a = relax(z, EVAL_MODE, None, tau=0.5)
    b = relax(z, EVAL_MODE, None, tau=0.5)
    assert np.array_equal(a.data, b.data)


def test_relax_train_saturates_at_low_temperature():
    # Monte Carlo: z=+10, tau=0.01 drives nearly every draw to ~1
    rng = np.random.default_rng(0)
    z = Tensor(np.full((1, 1), 10.0))
    hits = 0
    for _ in range(1000):
        out = relax(z, TRAIN_MODE, rng, tau=0.01)
        hits += int(out.data[0, 0] > 0.999)
    assert hits >= 990


def test_relax_train_gate_probability_is_sigmoid():
    # g1-g2 is logistic, so P(gate > 0.5) = sigmoid(z) exactly
    rng = np.random.default_rng(1)
    z = Tensor(np.full((1, 1), 0.7))
    draws = np.array([relax(z, TRAIN_MODE, rng, tau=1.0).data[0, 0]
                      for _ in range(4000)])
    p = 1.0 / (1.0 + np.exp(-0.7))
    se = np.sqrt(p * (1 - p) / 4000)
    assert abs(np.mean(draws > 0.5) - p) < 4 * se


def test_relax_validation():
    with pytest.raises(ConfigurationError):
        relax(Tensor(np.zeros((1, 1))), EVAL_MODE, None, tau=0.0)
    with pytest.raises(ConfigurationError):
        relax(Tensor(np.zeros((1, 1))), "bogus", None, tau=1.0)
    with pytest.raises(ConfigurationError):
        relax(Tensor(np.zeros((1, 1))), TRAIN_MODE, None, tau=1.0)


def test_normalize_uniform():
    alpha = normalize(Tensor(np.ones((4, 1))))
    assert np.allclose(alpha.data, 0.25)


def test_normalize_single_support():
    alpha = normalize(Tensor(np.array([[2.0], [0.0], [0.0], [0.0]])))
    assert np.allclose(alpha.data, [[1.0], [0.0], [0.0], [0.0]], atol=1e-9)


def test_normalize_scale_invariance():
    rng = np.random.default_rng(2)
    z = np.abs(rng.normal(size=(5, 3))) + 0.1
    base = normalize(Tensor(z)).data
    for c in (0.5, 3.0, 1e4):
        scaled = z.copy()
        scaled[:, 1] *= c
        out = normalize(Tensor(scaled)).data
        assert np.max(np.abs(out - base)) < 1e-12


def test_normalize_zero_column_uniform_fallback():
    z = np.array([[1.0, 0.0], [3.0, 0.0]])
    out = normalize(Tensor(z)).data
    assert np.allclose(out[:, 0], [0.25, 0.75], atol=1e-9)
    assert np.allclose(out[:, 1], [0.5, 0.5])


def test_normalize_rejects_negative():
    with pytest.raises(ConfigurationError):
        normalize(Tensor(np.array([[-1.0], [2.0]])))


def test_combine_poly_one_hot_selects_skill():
    stack = Tensor(np.arange(12.0).reshape(3, 4))
    alpha = Tensor(np.array([[0.0], [1.0], [0.0]]))
    out = combine_poly(stack, alpha)
    assert np.array_equal(out.data, stack.data[1])


def test_combine_poly_convexity_fixed_point():
    stack = Tensor(np.tile(np.arange(4.0), (3, 1)))
    alpha = Tensor(np.array([[0.2], [0.5], [0.3]]))
    out = combine_poly(stack, alpha)
    assert np.allclose(out.data, np.arange(4.0))


def test_combine_poly_hand_case():
    stack = Tensor(np.array([[2.0], [6.0]]))
    alpha = Tensor(np.array([[0.25], [0.75]]))
    assert np.allclose(combine_poly(stack, alpha).data, [5.0])


def test_combine_mhr_h1_equals_poly():
    rng = np.random.default_rng(3)
    stack = Tensor(rng.normal(size=(4, 8)))
    alpha = Tensor(np.abs(rng.normal(size=(4, 1))))
    a = combine_poly(stack, alpha)
    b = combine_mhr(stack, alpha, num_heads=1)
    assert np.array_equal(a.data, b.data)


def test_combine_mhr_identical_alpha_across_heads():
    rng = np.random.default_rng(4)
    stack = Tensor(rng.normal(size=(3, 12)))
    col = np.abs(rng.normal(size=(3, 1)))
    for h in (2, 3, 4):
        tiled = Tensor(np.tile(col, (1, h)))
        assert np.allclose(combine_mhr(stack, tiled, h).data,
                           combine_poly(stack, Tensor(col)).data,
                           atol=1e-14)


def test_combine_mhr_hand_case():
    # two heads pick different skills for their halves: result [1,1,3,3]
    stack = Tensor(np.array([[1.0, 1.0, 1.0, 1.0],
                             [3.0, 3.0, 3.0, 3.0]]))
    alpha = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    out = combine_mhr(stack, alpha, num_heads=2)
    assert np.array_equal(out.data, [1.0, 1.0, 3.0, 3.0])


def test_combine_mhr_head_independence():
    # changing one head's column only changes that head's slice
    rng = np.random.default_rng(5)
    stack = Tensor(rng.normal(size=(4, 8)))
    alpha = np.abs(rng.normal(size=(4, 2)))
    base = combine_mhr(Tensor(stack.data), Tensor(alpha), 2).data
    alpha2 = alpha.copy()
    alpha2[:, 1] = np.abs(rng.normal(size=4))
    out = combine_mhr(Tensor(stack.data), Tensor(alpha2), 2).data
    assert np.array_equal(base[:4], out[:4])
    assert not np.array_equal(base[4:], out[4:])


def test_combine_mhr_matches_slice_concat_oracle():
    rng = np.random.default_rng(6)
    S, h, P = 3, 4, 16
    stack = Tensor(rng.normal(size=(S, P)))
    alpha = Tensor(np.abs(rng.normal(size=(S, h))))
    got = combine_mhr(stack, alpha, h)
    # oracle: per head, combine the flat slices, then concatenate
    parts = []
    for k in range(h):
        head = slice_rows(Tensor(stack.data.T), k, h)   # (P/h, S)
        mixed = head.data @ alpha.data[:, k]
        parts.append(Tensor(mixed[:, None]))
    oracle = concat_rows(parts).data[:, 0]
    assert np.allclose(got.data, oracle, atol=1e-14)


def test_combine_mhr_rejects_bad_heads():
    with pytest.raises(ConfigurationError):
        combine_mhr(Tensor(np.ones((2, 10))), Tensor(np.ones((2, 3))), 3)


def test_temperature_schedule():
    s = TemperatureSchedule(1.0, 0.1, anneal_steps=10)
    assert s.at(0) == 1.0
    assert abs(s.at(10) - 0.1) < 1e-12
    assert abs(s.at(5) - 0.55) < 1e-12
    assert s.at(1000) == pytest.approx(0.1)


def test_group_map_periods():
    ids = tuple(f"s{i}" for i in range(6))
    gm1 = RoutingGroupMap(ids, period=1)
    assert gm1.num_groups == 6
    gm3 = RoutingGroupMap(ids, period=3)
    assert gm3.num_groups == 2
    assert gm3.group_of("s0") == gm3.group_of("s2") == 0
    assert gm3.group_of("s3") == 1
    gm4 = RoutingGroupMap(ids, period=4)
    assert gm4.num_groups == 2
    with pytest.raises(RoutingError):
        gm1.group_of("nope")


def make_routing(num_tasks=3, S=4, h=2, period=1, n_sites=4, seed=0):
    ids = tuple(f"s{i}" for i in range(n_sites))
    gm = RoutingGroupMap(ids, period=period)
    idx = {f"t{i}": i for i in range(num_tasks)}
    return RoutingState.learned(num_tasks, S, h, gm, idx, seed=seed)


def test_learned_routing_shapes_and_determinism():
    a = make_routing(seed=9)
    b = make_routing(seed=9)
    for g in a.logits:
        assert a.logits[g].shape == (3, 8)
        assert np.array_equal(a.logits[g].data, b.logits[g].data)


def test_alpha_eval_pure_function():
    r = make_routing()
    a1 = r.alpha_for_group("t1", 0, EVAL_MODE, None)
    a2 = r.alpha_for_group("t1", 0, EVAL_MODE, None)
    assert np.array_equal(a1.data, a2.data)
    assert a1.shape == (4, 2)
    assert np.allclose(a1.data.sum(axis=0), 1.0)


def test_group_sharing_in_one_pass():
    # two sites in one group resolve to the same cached alpha object
    bb = build_backbone(BackboneConfig(vocab_size=16, model_dim=8,
                                       num_layers=1))
    sites = bb.injection_sites("lora")
    inv = init_inventory(sites, 4, "lora", seed=0, rank=2)
    gm = RoutingGroupMap(tuple(s.site_id for s in sites), period=len(sites))
    routing = RoutingState.learned(1, 4, 1, gm, {"t0": 0}, seed=0)
    cache = {}
    rng = np.random.default_rng(0)
    resolve_site(inv, routing, sites[0], "t0", TRAIN_MODE, rng, 0, cache)
    alpha_after_first = {g: t.data.copy() for g, t in cache.items()}
    resolve_site(inv, routing, sites[1], "t0", TRAIN_MODE, rng, 0, cache)
    assert set(cache) == {0}
    assert np.array_equal(cache[0].data, alpha_after_first[0])


def test_resolve_without_routing_is_uniform_average():
    bb = build_backbone(BackboneConfig(vocab_size=16, model_dim=8,
                                       num_layers=1))
    sites = bb.injection_sites("lora")
    inv = init_inventory(sites, 4, "lora", seed=1, rank=2)
    delta = resolve_site(inv, None, sites[0], "t0", EVAL_MODE, None, 0, {})
    want = inv.stacks[sites[0].site_id]["A"].data.mean(axis=0)
    assert np.allclose(delta.A.data.reshape(-1), want, atol=1e-14)


def test_fixed_routing_normalizes_rows():
    gm = RoutingGroupMap(("s0",), period=1)
    alloc = np.array([[1.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    r = RoutingState.fixed(alloc, gm, {"t0": 0, "t1": 1})
    a0 = r.alpha_for_group("t0", 0, EVAL_MODE, None)
    assert np.allclose(a0.data[:, 0], [0.5, 0.5, 0.0])
    with pytest.raises(ConfigurationError):
        RoutingState.fixed(np.array([[0.0, 0.0]]), gm, {"t0": 0})
    with pytest.raises(RoutingError):
        r.register_test_task("new", 0)


def test_register_test_task_rows():
    r = make_routing(n_sites=4, period=2)
    r.register_test_task("heldout", seed=5)
    assert set(k for k in r.test_rows) == {(0, "heldout"), (1, "heldout")}
    alpha = r.alpha_for_group("heldout", 1, EVAL_MODE, None)
    assert alpha.shape == (4, 2)
    with pytest.raises(RoutingError):
        r.alpha_for_group("unknown", 0, EVAL_MODE, None)


def test_routing_logits_gradcheck():
    # finite differences through relax+normalize+combine in eval mode
    rng = np.random.default_rng(7)
    z = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    stack = Tensor(rng.normal(size=(4, 6)), requires_grad=True)

    def loss_fn():
        alpha = normalize(relax(z, EVAL_MODE, None, tau=0.7))
        out = combine_mhr(stack, alpha, num_heads=2)
        return tsum(out)

    gradcheck(loss_fn, [z, stack], tol=1e-4)


def test_gumbel_noise_differentiable_path():
    # train mode with a fixed noise draw still backpropagates into z
    rng = np.random.default_rng(8)
    z = Tensor(rng.normal(size=(3, 1)), requires_grad=True)
    out = relax(z, TRAIN_MODE, np.random.default_rng(0), tau=0.5)
    tsum(out).backward()
    assert z.grad is not None and np.all(z.grad != 0)
