"""Multi-task ranking model: losses, distillation wiring, exact gradients."""

import math

import numpy as np
import pytest

from onlinekd.errors import ConfigError
from onlinekd.nncore import IDENTITY, RELU, TrainConfig
from onlinekd.ranker import (
    AUXILIARY,
    BINARY,
    DIRECT,
    NO_DISTILL,
    PROB_FLOOR,
    REGRESSION,
    ModelConfig,
    ModelOptimizer,
    PredictionSet,
    SoftTargets,
    TaskSpec,
    apply_gradients,
    build_model,
    compute_loss_and_grads,
    distill_loss,
    hard_loss,
    model_forward,
    scale_config,
    sharpen_probability,
    total_loss,
    validate_tasks,
)

from oracles import (
    numeric_gradient,
    ref_binary_ce_from_logit,
    ref_sigmoid,
    ref_softplus,
    relative_error,
)

TASKS = (
    TaskSpec("ctr", BINARY, distill=True),
    TaskSpec("ltv", REGRESSION, distill=True),
    TaskSpec("aux_click", BINARY),
)


def small_config(mode, distill=("ctr", "ltv")):
    return ModelConfig(
        feature_dim=4,
        trunk_widths=(5,),
        tower_widths=(3,),
        tasks=TASKS,
        mode=mode,
        distill_tasks=distill if mode != NO_DISTILL else (),
    )


def test_task_spec_validation():
    with pytest.raises(ConfigError):
        TaskSpec("x", "ordinal")
    with pytest.raises(ConfigError):
        TaskSpec("x", BINARY, category="primary")
    with pytest.raises(ConfigError):
        validate_tasks(())
    with pytest.raises(ConfigError):
        validate_tasks([TaskSpec("a", BINARY), TaskSpec("a", REGRESSION)])


def test_model_config_validation():
    with pytest.raises(ConfigError):
        small_config("both")
    with pytest.raises(ConfigError):
        ModelConfig(4, (5,), (3,), TASKS, mode=DIRECT, distill_tasks=("missing",))
    with pytest.raises(ConfigError):
        ModelConfig(4, (5,), (3,), TASKS, mode=NO_DISTILL, distill_tasks=("ctr",))
    cfg = small_config(AUXILIARY)
    assert cfg.task("ltv").kind == REGRESSION
    with pytest.raises(KeyError):
        cfg.task("nope")


@pytest.mark.parametrize("mode", [NO_DISTILL, DIRECT, AUXILIARY])
def test_parameter_count_matches_built_model(mode):
    cfg = small_config(mode)
    model = build_model(cfg, np.random.default_rng(0))
    assert model.parameter_count() == cfg.parameter_count()


def test_parameter_count_by_hand():
    cfg = small_config(AUXILIARY)
    # trunk 4->5, three towers 5->3->1, two aux heads 5->1
    expected = (4 * 5 + 5) + 3 * ((5 * 3 + 3) + (3 * 1 + 1)) + 2 * (5 * 1 + 1)
    assert cfg.parameter_count() == expected


def test_scale_config_widens_trunk_only():
    cfg = small_config(DIRECT)
    big = scale_config(cfg, 4)
    assert big.trunk_widths == (20,)
    assert big.tower_widths == cfg.tower_widths
    assert big.parameter_count() > cfg.parameter_count()
    assert scale_config(cfg, 1) == cfg
    with pytest.raises(ConfigError):
        scale_config(cfg, 0)


def test_build_model_structure():
    model = build_model(small_config(AUXILIARY), np.random.default_rng(3))
    assert model.trunk.layers[-1].activation == RELU
    for tower in model.towers.values():
        assert tower.layers[-1].activation == IDENTITY
        assert tower.out_dim == 1
    assert set(model.aux_heads) == {"ctr", "ltv"}
    for head in model.aux_heads.values():
        assert len(head.layers) == 1
        assert head.layers[0].activation == IDENTITY
    direct = build_model(small_config(DIRECT), np.random.default_rng(3))
    assert direct.aux_heads == {}


def test_init_bit_identical_across_modes():
    models = {
        mode: build_model(small_config(mode), np.random.default_rng(77))
        for mode in (NO_DISTILL, DIRECT, AUXILIARY)
    }
    ref = models[NO_DISTILL]
    for mode in (DIRECT, AUXILIARY):
        other = models[mode]
        for a, b in zip(ref.trunk.layers, other.trunk.layers):
            assert np.array_equal(a.weights, b.weights)
        for name in ref.towers:
            for a, b in zip(ref.towers[name].layers, other.towers[name].layers):
                assert np.array_equal(a.weights, b.weights)


def test_prediction_set_prob_floor_and_score():
    preds = PredictionSet(hard_logits={"t": np.array([-50.0, 0.0, 50.0])})
    p = preds.prob("t")
    assert p[0] == PROB_FLOOR
    assert p[1] == 0.5
    assert p[2] == 1.0 - PROB_FLOOR
    assert np.array_equal(preds.score("t", BINARY), p)
    assert np.array_equal(preds.score("t", REGRESSION), preds.hard_logits["t"])


def test_model_forward_heads_by_mode():
    x = np.random.default_rng(5).standard_normal((6, 4))
    aux_model = build_model(small_config(AUXILIARY), np.random.default_rng(1))
    preds = model_forward(aux_model, x)
    assert set(preds.hard_logits) == {"ctr", "ltv", "aux_click"}
    assert set(preds.aux_logits) == {"ctr", "ltv"}
    assert preds.aux_logits["ctr"].shape == (6,)
    direct = build_model(small_config(DIRECT), np.random.default_rng(1))
    assert model_forward(direct, x).aux_logits == {}


def test_hard_loss_matches_reference():
    rng = np.random.default_rng(8)
    logits = rng.standard_normal(20) * 3
    labels = (rng.random(20) < 0.5).astype(float)
    got = hard_loss(logits, labels, BINARY)
    want = [ref_binary_ce_from_logit(z, y) for z, y in zip(logits, labels)]
    np.testing.assert_allclose(got, want, rtol=1e-12)
    values = rng.standard_normal(20)
    np.testing.assert_allclose(
        hard_loss(logits, values, REGRESSION), (logits - values) ** 2, rtol=1e-12
    )
    with pytest.raises(ConfigError):
        hard_loss(logits, labels, "ordinal")


def test_sharpen_probability():
    p = np.array([0.1, 0.5, 0.9])
    assert sharpen_probability(p, 1.0) is p
    sharp = sharpen_probability(p, 0.5)
    for pi, si in zip(p, sharp):
        logit = math.log(pi / (1.0 - pi))
        assert si == pytest.approx(ref_sigmoid(logit / 0.5), abs=1e-12)
    # p = 0.5 is a fixed point at any temperature
    assert sharpen_probability(np.array([0.5]), 3.7)[0] == pytest.approx(0.5, abs=1e-15)
    # T < 1 sharpens away from 0.5, T > 1 flattens toward it
    assert sharpen_probability(np.array([0.9]), 0.5)[0] > 0.9
    assert sharpen_probability(np.array([0.9]), 2.0)[0] < 0.9


def test_distill_loss_reference_and_validation():
    s = np.array([0.3, -1.2])
    t = np.array([0.7, 0.2])
    got = distill_loss(s, t, BINARY, temperature=2.0)
    for gi, si, ti in zip(got, s, t):
        p = ref_sigmoid(math.log(ti / (1.0 - ti)) / 2.0)
        assert gi == pytest.approx(ref_softplus(si) - p * si, abs=1e-12)
    np.testing.assert_allclose(
        distill_loss(s, np.array([1.0, -2.0]), REGRESSION), (s - [1.0, -2.0]) ** 2
    )
    with pytest.raises(ValueError):
        distill_loss(s, np.array([0.5, 1.0]), BINARY)
    with pytest.raises(ValueError):
        distill_loss(s, np.array([0.0, 0.5]), BINARY)


def batch_inputs(n=7, seed=13):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 4))
    hard = {
        "ctr": (rng.random(n) < 0.4).astype(float),
        "ltv": rng.gamma(2.0, 1.0, size=n),
        "aux_click": (rng.random(n) < 0.6).astype(float),
    }
    present = rng.random(n) < 0.7
    present[0] = True  # keep at least one covered row
    soft = {
        "ctr": SoftTargets(rng.uniform(0.05, 0.95, size=n), present.copy()),
        "ltv": SoftTargets(rng.standard_normal(n), present.copy()),
    }
    return x, hard, soft


def test_total_loss_guards():
    model = build_model(small_config(NO_DISTILL), np.random.default_rng(2))
    x, hard, soft = batch_inputs()
    preds = model_forward(model, x)
    with pytest.raises(ConfigError):
        total_loss(model, preds, hard, soft)
    aux = build_model(small_config(AUXILIARY, distill=("ctr",)), np.random.default_rng(2))
    preds = model_forward(aux, x)
    with pytest.raises(ConfigError):
        total_loss(aux, preds, hard, None, alpha={"ltv": 0.5})
    with pytest.raises(ValueError):
        total_loss(aux, preds, {**hard, "ctr": hard["ctr"][:-1]}, None)


def test_soft_loss_coverage_normalization():
    model = build_model(small_config(AUXILIARY), np.random.default_rng(4))
    x, hard, soft = batch_inputs()
    preds = model_forward(model, x)
    breakdown, _ = total_loss(model, preds, hard, soft, alpha={"ctr": 0.7, "ltv": 0.3})
    n = x.shape[0]
    for name, kind in [("ctr", BINARY), ("ltv", REGRESSION)]:
        z = preds.aux_logits[name]
        expected = 0.0
        for i in range(n):
            if not soft[name].present[i]:
                continue
            if kind == BINARY:
                expected += ref_softplus(z[i]) - soft[name].values[i] * z[i]
            else:
                expected += (z[i] - soft[name].values[i]) ** 2
        assert breakdown.soft[name] == pytest.approx(expected / n, rel=1e-12)
    expected_total = sum(breakdown.hard.values())
    expected_total += 0.7 * breakdown.soft["ctr"] + 0.3 * breakdown.soft["ltv"]
    assert breakdown.total == pytest.approx(expected_total, rel=1e-12)


def test_hard_loss_means_match_reference():
    model = build_model(small_config(NO_DISTILL), np.random.default_rng(4))
    x, hard, _ = batch_inputs()
    preds = model_forward(model, x)
    breakdown, _ = total_loss(model, preds, hard, None)
    z = preds.hard_logits["ctr"]
    want = np.mean([ref_binary_ce_from_logit(zi, yi) for zi, yi in zip(z, hard["ctr"])])
    assert breakdown.hard["ctr"] == pytest.approx(want, rel=1e-12)
    zr = preds.hard_logits["ltv"]
    assert breakdown.hard["ltv"] == pytest.approx(
        np.mean((zr - hard["ltv"]) ** 2), rel=1e-12
    )


def test_zero_coverage_gives_zero_soft_and_control_grads():
    model = build_model(small_config(AUXILIARY), np.random.default_rng(6))
    x, hard, soft = batch_inputs()
    for t in soft.values():
        t.present[:] = False
    loss_soft, grads_soft, _ = compute_loss_and_grads(
        model, x, hard, soft, alpha={"ctr": 1.0, "ltv": 1.0}
    )
    loss_none, grads_none, _ = compute_loss_and_grads(model, x, hard, None)
    assert loss_soft.soft == {"ctr": 0.0, "ltv": 0.0}
    assert loss_soft.total == loss_none.total
    for a, b in zip(grads_soft.trunk, grads_none.trunk):
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    for name in grads_soft.aux:
        for gw, gb in grads_soft.aux[name]:
            assert not gw.any() and not gb.any()


def test_alpha_zero_grads_bit_identical_to_no_soft():
    for mode in (DIRECT, AUXILIARY):
        model = build_model(small_config(mode), np.random.default_rng(9))
        x, hard, soft = batch_inputs()
        _, with_soft, _ = compute_loss_and_grads(
            model, x, hard, soft, alpha={"ctr": 0.0, "ltv": 0.0}
        )
        _, without, _ = compute_loss_and_grads(model, x, hard, None)
        for a, b in zip(with_soft.trunk, without.trunk):
            assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
        for name in with_soft.towers:
            for a, b in zip(with_soft.towers[name], without.towers[name]):
                assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


GRAD_CASES = [
    (NO_DISTILL, None, None, 1.0, None),
    (DIRECT, "soft", {"ctr": 0.7, "ltv": 0.3}, 1.0, None),
    (DIRECT, "soft", {"ctr": 1.0, "ltv": 1.0}, 2.0, None),
    (AUXILIARY, "soft", {"ctr": 0.7, "ltv": 0.3}, 1.0, None),
    (AUXILIARY, "soft", {"ctr": 0.5, "ltv": 0.5}, 0.5, 0.9),
]


def jitter_biases(model, seed=99):
    """Move zero-initialized biases off the exact ReLU kink (z == 0 when a
    whole trunk row is dead), where the subgradient convention and a central
    difference legitimately disagree."""
    rng = np.random.default_rng(seed)
    for mlp in [model.trunk, *model.towers.values(), *model.aux_heads.values()]:
        for layer in mlp.layers:
            layer.bias += rng.uniform(0.01, 0.05, size=layer.bias.shape)


@pytest.mark.parametrize("mode,use_soft,alpha,temperature,clip", GRAD_CASES)
def test_gradients_match_finite_differences(mode, use_soft, alpha, temperature, clip):
    model = build_model(small_config(mode), np.random.default_rng(21))
    jitter_biases(model)
    x, hard, soft = batch_inputs(seed=31)
    soft_arg = soft if use_soft else None

    def loss():
        preds = model_forward(model, x, clip)
        breakdown, _ = total_loss(model, preds, hard, soft_arg, alpha, temperature)
        return breakdown.total

    _, grads, _ = compute_loss_and_grads(
        model, x, hard, soft_arg, alpha, clip, temperature
    )
    arrays, analytic = [], []
    mlps = [("trunk", model.trunk, grads.trunk)]
    mlps += [(n, model.towers[n], grads.towers[n]) for n in sorted(model.towers)]
    mlps += [(n, model.aux_heads[n], grads.aux[n]) for n in sorted(model.aux_heads)]
    for _, mlp, g in mlps:
        for layer, (gw, gb) in zip(mlp.layers, g):
            arrays.extend([layer.weights, layer.bias])
            analytic.extend([gw, gb])
    numeric = numeric_gradient(loss, arrays, eps=1e-6)
    assert relative_error(numeric, analytic) < 1e-7


def test_auxiliary_knowledge_reaches_trunk_not_tower():
    model = build_model(small_config(AUXILIARY), np.random.default_rng(14))
    x, hard, soft = batch_inputs()
    _, with_soft, _ = compute_loss_and_grads(model, x, hard, soft, alpha={"ctr": 1.0, "ltv": 1.0})
    _, without, _ = compute_loss_and_grads(model, x, hard, None)
    # serving towers see hard-label gradients only
    for name in with_soft.towers:
        for a, b in zip(with_soft.towers[name], without.towers[name]):
            assert np.array_equal(a[0], b[0])
    # the trunk gradient changes: teacher signal flows through shared layers
    assert not np.array_equal(with_soft.trunk[0][0], without.trunk[0][0])
    # and aux heads receive nonzero gradients
    assert any(gw.any() for gw, _ in with_soft.aux["ctr"])


def test_direct_soft_loss_lands_on_serving_tower():
    model = build_model(small_config(DIRECT), np.random.default_rng(14))
    x, hard, soft = batch_inputs()
    _, with_soft, _ = compute_loss_and_grads(model, x, hard, soft, alpha={"ctr": 1.0, "ltv": 1.0})
    _, without, _ = compute_loss_and_grads(model, x, hard, None)
    assert not np.array_equal(with_soft.towers["ctr"][0][0], without.towers["ctr"][0][0])
    # non-distilled task tower is untouched by soft labels
    for a, b in zip(with_soft.towers["aux_click"], without.towers["aux_click"]):
        assert np.array_equal(a[0], b[0])


def test_apply_gradients_steps_every_component():
    model = build_model(small_config(AUXILIARY), np.random.default_rng(10))
    opt = ModelOptimizer.for_model(model)
    x, hard, soft = batch_inputs()
    _, grads, _ = compute_loss_and_grads(model, x, hard, soft, alpha={"ctr": 1.0, "ltv": 1.0})
    before = model.copy()
    apply_gradients(model, grads, opt, TrainConfig(base_lr=0.01))
    assert opt.trunk.step == 1
    assert all(s.step == 1 for s in opt.towers.values())
    assert all(s.step == 1 for s in opt.aux.values())
    assert not np.array_equal(model.trunk.layers[0].weights, before.trunk.layers[0].weights)
