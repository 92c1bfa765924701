"""Margin machinery, register gating, loss wiring, and the training loop."""

import math
from dataclasses import replace

import numpy as np
import pytest
from helpers import max_rel_err, numeric_gradient, random_simplex, standard_hp

from uman.core import (
    UNKNOWN,
    Hyperparams,
    MarginResult,
    TargetMarginRegister,
    TrainingDiverged,
    batch_margins,
    classification_loss,
    domain_loss,
    extract_features,
    grl_lambda,
    infer,
    margin_of,
    margin_vector,
    normalize_weights,
    predict_classes,
    source_weight,
    target_weight,
    train,
)
from uman.labelspace import LabelPartition, UmdaMatrix, partition_from_matrix
from uman.nn import (
    Mlp,
    NonFiniteGradientError,
    Tape,
    Value,
    forward_mlp,
    grad_reverse,
    l2_normalize,
    mlp_apply,
    run_backward,
    softmax,
)
from uman.synth import SyntheticSpec, generate


class TestMargin:
    def test_matches_sort_oracle(self):
        rng = np.random.default_rng(0)
        probs = random_simplex(rng, 100, 5)
        for row in probs:
            got = margin_of(row)
            top2 = np.sort(row)[::-1][:2]
            assert got.pseudo_label == int(np.argmax(row))
            assert got.margin == pytest.approx(top2[0] - top2[1], abs=1e-12)
            assert 0.0 <= got.margin <= 1.0

    def test_tie_breaks_toward_lowest_index(self):
        got = margin_of([0.4, 0.4, 0.2])
        assert got == MarginResult(0, pytest.approx(0.0, abs=1e-12))

    def test_extremes(self):
        assert margin_of([1.0, 0.0, 0.0]).margin == 1.0
        assert margin_of([0.25, 0.25, 0.25, 0.25]).margin == 0.0

    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            margin_of([1.0])
        with pytest.raises(ValueError):
            margin_of(np.ones((2, 2)))

    def test_batch_margins_equal_per_row_loop(self):
        probs = random_simplex(np.random.default_rng(1), 50, 4)
        pseudo, margins = batch_margins(probs)
        for i, row in enumerate(probs):
            single = margin_of(row)
            assert pseudo[i] == single.pseudo_label
            assert margins[i] == pytest.approx(single.margin, abs=1e-12)


class TestMarginVector:
    def test_matches_group_by_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            probs = random_simplex(rng, int(rng.integers(1, 40)), int(rng.integers(2, 6)))
            values, present = margin_vector(probs)
            pseudo, margins = batch_margins(probs)
            k = probs.shape[1]
            assert values.shape == (k,) and present.shape == (k,)
            for c in range(k):
                mask = pseudo == c
                assert present[c] == mask.any()
                want = margins[mask].mean() if mask.any() else 0.0
                assert values[c] == pytest.approx(want, abs=1e-12)

    def test_absent_class_reports_zero(self):
        values, present = margin_vector(np.array([[0.9, 0.1, 0.0]]))
        assert not present[1] and not present[2]
        assert values[1] == 0.0 and values[2] == 0.0


class TestRegister:
    def test_matches_stored_history_oracle(self):
        rng = np.random.default_rng(3)
        k = 4
        reg = TargetMarginRegister(k)
        history = []
        for _ in range(30):
            vec = rng.uniform(0, 1, size=k)
            present = rng.uniform(size=k) < 0.6
            vec = np.where(present, vec, 0.0)
            reg.update(vec, present)
            history.append((vec, present))
        for c in range(k):
            contribs = [v[c] for v, p in history if p[c]]
            want = np.mean(contribs) if contribs else 0.0
            assert reg.values[c] == pytest.approx(want, abs=1e-9)
        assert reg.step == 30

    def test_running_mean_form_when_always_present(self):
        rng = np.random.default_rng(4)
        k = 3
        reg = TargetMarginRegister(k)
        manual = np.zeros(k)
        for t in range(12):
            vec = rng.uniform(0, 1, size=k)
            reg.update(vec, np.ones(k, dtype=bool))
            manual = (t * manual + vec) / (t + 1)
            np.testing.assert_allclose(reg.values, manual, atol=1e-12)

    def test_frozen_two_step_mean(self):
        reg = TargetMarginRegister(1)
        reg.update([0.4], [True])
        assert reg.values[0] == pytest.approx(0.4)
        reg.update([0.8], [True])
        assert reg.values[0] == pytest.approx(0.6)
        assert reg.as_rows() == [(0, pytest.approx(0.6))]

    def test_never_seen_class_stays_zero(self):
        reg = TargetMarginRegister(2)
        reg.update([0.5, 0.0], [True, False])
        assert reg.values[1] == 0.0

    def test_update_validation(self):
        reg = TargetMarginRegister(2)
        with pytest.raises(ValueError, match="length 2"):
            reg.update([0.5], [True])
        with pytest.raises(ValueError, match="\\[0, 1\\]"):
            reg.update([1.5, 0.0], [True, False])
        with pytest.raises(ValueError):
            TargetMarginRegister(0)


class TestWeights:
    def test_source_weight_reads_the_register(self):
        reg = TargetMarginRegister(3)
        reg.update([0.2, 0.9, 0.0], [True, True, False])
        assert source_weight(reg, 0) == pytest.approx(0.2)
        assert source_weight(reg, 1) == pytest.approx(0.9)
        assert source_weight(reg, 2) == 0.0
        with pytest.raises(ValueError):
            source_weight(reg, 3)

    def test_target_weight_is_margin_times_register(self):
        reg = TargetMarginRegister(2)
        reg.update([0.6, 0.1], [True, True])
        got = target_weight(reg, MarginResult(pseudo_label=0, margin=0.5))
        assert got == pytest.approx(0.5 * 0.6)

    def test_weights_stay_in_unit_interval(self):
        rng = np.random.default_rng(5)
        reg = TargetMarginRegister(4)
        for _ in range(10):
            probs = random_simplex(rng, 25, 4)
            vec, present = margin_vector(probs)
            reg.update(vec, present)
        for label in range(4):
            assert 0.0 <= source_weight(reg, label) <= 1.0
        pseudo, margins = batch_margins(random_simplex(rng, 25, 4))
        for p, m in zip(pseudo, margins):
            assert 0.0 <= target_weight(reg, MarginResult(int(p), float(m))) <= 1.0

    def test_normalize_weights_mean_one(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            raw = rng.uniform(0, 3, size=rng.integers(1, 50))
            out = normalize_weights(raw)
            assert out.mean() == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(
            normalize_weights(raw), normalize_weights(4.0 * raw), atol=1e-12
        )

    def test_normalize_all_zero_stays_zero(self):
        np.testing.assert_array_equal(normalize_weights(np.zeros(5)), np.zeros(5))

    def test_normalize_rejects_negatives(self):
        with pytest.raises(ValueError):
            normalize_weights(np.array([0.5, -0.1]))


def _ce_oracle(logits, labels):
    """Plain-mean cross entropy via shifted log-sum-exp, python loops only."""
    total = 0.0
    for row, y in zip(logits, labels):
        shift = max(row)
        lse = shift + math.log(sum(math.exp(v - shift) for v in row))
        total += lse - row[y]
    return total / len(labels)


class TestClassificationLoss:
    def test_is_mean_of_per_source_cross_entropies(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            m = int(rng.integers(1, 4))
            logits, labels, want = [], [], 0.0
            for _ in range(m):
                n, k = int(rng.integers(2, 9)), int(rng.integers(2, 5))
                lg = rng.standard_normal((n, k))
                y = rng.integers(0, k, size=n)
                logits.append(Value(lg))
                labels.append(y)
                want += _ce_oracle(lg, y) / m
            got = classification_loss(logits, labels).data[0, 0]
            assert got == pytest.approx(want, abs=1e-9)

    def test_rejects_mismatched_lists(self):
        with pytest.raises(ValueError):
            classification_loss([], [])
        with pytest.raises(ValueError):
            classification_loss([Value(np.zeros((1, 2)))], [])

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        lgs = [rng.standard_normal((4, 3)), rng.standard_normal((5, 3))]
        ys = [rng.integers(0, 3, size=4), rng.integers(0, 3, size=5)]

        def f():
            return classification_loss([Value(lg) for lg in lgs], ys).data[0, 0]

        tape = Tape()
        nodes = [Value(lg) for lg in lgs]
        run_backward(tape, classification_loss(nodes, ys, tape))
        for node, lg in zip(nodes, lgs):
            assert max_rel_err(node.grad, numeric_gradient(f, lg)) < 1e-4


def _domain_loss_oracle(source_ds, source_ws, target_d, target_w):
    m = len(source_ds)
    total = 0.0
    for d, w in zip(source_ds, source_ws):
        total += np.mean([-wi * math.log(di) for wi, di in zip(w, d)]) / m
    total += np.mean([-wi * math.log(1.0 - di) for wi, di in zip(target_w, target_d)])
    return total


class TestDomainLoss:
    def test_frozen_coin_flip_value(self):
        # one source, all outputs 0.5, unit weights: ln 2 on each side
        src = Value(np.full((4, 1), 0.5))
        tgt = Value(np.full((6, 1), 0.5))
        got = domain_loss([src], [np.ones(4)], tgt, np.ones(6)).data[0, 0]
        assert got == pytest.approx(2.0 * math.log(2.0), abs=1e-12)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            m = int(rng.integers(1, 4))
            outs, ws, d_raw, w_raw = [], [], [], []
            for _ in range(m):
                n = int(rng.integers(1, 8))
                d = rng.uniform(0.05, 0.95, size=n)
                w = rng.uniform(0, 2, size=n)
                outs.append(Value(d[:, None]))
                ws.append(w)
                d_raw.append(d)
                w_raw.append(w)
            nt = int(rng.integers(1, 8))
            dt = rng.uniform(0.05, 0.95, size=nt)
            wt = rng.uniform(0, 2, size=nt)
            got = domain_loss(outs, ws, Value(dt[:, None]), wt).data[0, 0]
            want = _domain_loss_oracle(d_raw, w_raw, dt, wt)
            assert got == pytest.approx(want, abs=1e-9)

    def test_zero_weights_zero_loss_and_gradient(self):
        src = Value(np.random.default_rng(0).uniform(0.2, 0.8, size=(3, 1)))
        tgt = Value(np.random.default_rng(1).uniform(0.2, 0.8, size=(3, 1)))
        tape = Tape()
        loss = domain_loss([src], [np.zeros(3)], tgt, np.zeros(3), tape)
        assert loss.data[0, 0] == 0.0
        run_backward(tape, loss)
        np.testing.assert_array_equal(src.grad, 0.0)
        np.testing.assert_array_equal(tgt.grad, 0.0)

    def test_saturated_outputs_stay_finite(self):
        src = Value(np.array([[0.0], [1.0]]))
        tgt = Value(np.array([[1.0], [0.0]]))
        tape = Tape()
        loss = domain_loss([src], [np.ones(2)], tgt, np.ones(2), tape)
        assert math.isfinite(loss.data[0, 0])
        run_backward(tape, loss)
        assert np.isfinite(src.grad).all() and np.isfinite(tgt.grad).all()
        # fully clamped rows contribute no gradient
        np.testing.assert_array_equal(src.grad, 0.0)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(10)
        d1 = rng.uniform(0.1, 0.9, size=(4, 1))
        d2 = rng.uniform(0.1, 0.9, size=(3, 1))
        dt = rng.uniform(0.1, 0.9, size=(5, 1))
        w1, w2 = rng.uniform(0, 1, size=4), rng.uniform(0, 1, size=3)
        wt = rng.uniform(0, 1, size=5)

        def f():
            return domain_loss(
                [Value(d1), Value(d2)], [w1, w2], Value(dt), wt
            ).data[0, 0]

        tape = Tape()
        n1, n2, nt = Value(d1), Value(d2), Value(dt)
        run_backward(tape, domain_loss([n1, n2], [w1, w2], nt, wt, tape))
        assert max_rel_err(n1.grad, numeric_gradient(f, d1)) < 1e-4
        assert max_rel_err(n2.grad, numeric_gradient(f, d2)) < 1e-4
        assert max_rel_err(nt.grad, numeric_gradient(f, dt)) < 1e-4


class TestGrlRamp:
    def test_starts_at_zero_and_saturates(self):
        assert grl_lambda(0, 100) == pytest.approx(0.0, abs=1e-12)
        assert grl_lambda(100, 100, max_lambda=0.8) == pytest.approx(0.8, abs=1e-3)

    def test_monotone_in_progress(self):
        vals = [grl_lambda(s, 50) for s in range(0, 51, 5)]
        assert all(a < b for a, b in zip(vals, vals[1:]))

    def test_zero_total_steps_means_full_strength(self):
        assert grl_lambda(0, 0, max_lambda=2.0) == pytest.approx(
            2.0 * (2.0 / (1.0 + math.exp(-10.0)) - 1.0), abs=1e-12
        )


class TestHyperparams:
    def test_collects_violations(self):
        bad = Hyperparams(w0=1.5, epsilon=-0.1, batch_size=0, lr_features=0.0, feature_dim=0)
        assert len(bad.violations()) == 5

    def test_negative_weight_decay_rejected(self):
        assert any("weight_decay" in v for v in Hyperparams(weight_decay=-1e-3).violations())

    def test_defaults_valid(self):
        assert Hyperparams().violations() == []


MATRIX = UmdaMatrix((4, 4), (3, 3), 6, 3)


def tiny_setup(seed=0, **hp_kw):
    partition = partition_from_matrix(MATRIX)
    spec = SyntheticSpec(feature_dim=8, samples_per_class=20, seed=seed)
    datasets = generate(spec, partition)
    base = dict(
        max_steps=25,
        batch_size=16,
        feature_hidden=(16,),
        feature_dim=8,
        disc_hidden=(8,),
        seed=seed,
    )
    base.update(hp_kw)
    return datasets, partition, standard_hp(**base)


class TestTrainerMechanics:
    def test_zero_steps_returns_fresh_nets(self):
        datasets, partition, hp = tiny_setup(max_steps=0)
        result = train(datasets, partition, hp)
        assert result.trace == []
        assert result.register.step == 0
        assert (result.register.values == 0).all()

    def test_gate_closed_when_epsilon_zero(self):
        datasets, partition, hp = tiny_setup(epsilon=0.0)
        result = train(datasets, partition, hp)
        assert result.register.step == 0
        assert all(not r.tmr_updated for r in result.trace)
        # with an all-zero register every margin weight is zero
        assert all(r.mean_weight_common == 0.0 for r in result.trace)
        assert all(r.mean_weight_target == 0.0 for r in result.trace)

    def test_gate_matches_trace_errors(self):
        for eps in (0.1, 1.0):
            datasets, partition, hp = tiny_setup(epsilon=eps)
            result = train(datasets, partition, hp)
            for r in result.trace:
                assert r.tmr_updated == (max(r.source_errors) < eps)
            assert result.register.step == sum(r.tmr_updated for r in result.trace)

    def test_source_only_never_touches_register_or_discriminator(self):
        datasets, partition, hp = tiny_setup(epsilon=1.0)
        result = train(datasets, partition, hp, adversarial=False)
        assert result.register.step == 0
        assert all(r.domain_loss == 0.0 for r in result.trace)
        fresh = train(datasets, partition, replace(hp, max_steps=0))
        for (p, _), (q, _) in zip(
            result.discriminator.param_arrays(), fresh.discriminator.param_arrays()
        ):
            np.testing.assert_array_equal(p, q)

    def test_classification_loss_decreases(self):
        datasets, partition, hp = tiny_setup(
            max_steps=150, batch_size=1000, lr_features=0.2, lr_classifier=0.2
        )
        result = train(datasets, partition, hp, adversarial=False)
        first, last = result.trace[0].class_loss, result.trace[-1].class_loss
        assert last < first * 0.5

    def test_deterministic_given_seed(self):
        datasets, partition, hp = tiny_setup()
        a = train(datasets, partition, hp)
        b = train(datasets, partition, hp)
        assert a.trace == b.trace
        for net_a, net_b in (
            (a.feature_net, b.feature_net),
            (a.classifier, b.classifier),
            (a.discriminator, b.discriminator),
        ):
            for (p, _), (q, _) in zip(net_a.param_arrays(), net_b.param_arrays()):
                np.testing.assert_array_equal(p, q)

    def test_different_seed_differs(self):
        a = train(*tiny_setup(seed=0))
        b = train(*tiny_setup(seed=1))
        assert not np.array_equal(
            a.feature_net.layers[0].w, b.feature_net.layers[0].w
        )

    def test_non_finite_loss_aborts_with_context(self):
        datasets, partition, hp = tiny_setup()
        datasets[0].features[:, 0] = np.nan
        with pytest.raises(TrainingDiverged) as exc:
            train(datasets, partition, hp)
        assert exc.value.step == 0
        assert exc.value.last_report is None

    def test_rejects_bad_inputs(self):
        datasets, partition, hp = tiny_setup()
        with pytest.raises(ValueError, match="weight_mode"):
            train(datasets, partition, hp, weight_mode="squares")
        with pytest.raises(ValueError, match="source datasets"):
            train(datasets[:-1], partition, hp)
        with pytest.raises(ValueError, match="w0"):
            train(datasets, partition, replace(hp, w0=2.0))
        swapped = [datasets[-1]] + list(datasets[1:-1]) + [datasets[0]]
        with pytest.raises(ValueError, match="no labels"):
            train(swapped, partition, hp)

    def test_rejects_non_contiguous_source_classes(self):
        partition = LabelPartition.from_primaries([(0, 2)], (0, 1), 3)
        spec = SyntheticSpec(feature_dim=4, samples_per_class=5)
        datasets = generate(spec, partition)
        _, _, hp = tiny_setup()
        with pytest.raises(ValueError, match="contiguous"):
            train(datasets, partition, hp)


class TestGradientReversalDirection:
    def test_feature_gradients_flip_sign_with_lambda(self):
        rng = np.random.default_rng(11)
        fnet = Mlp([4, 5, 3], ["relu", "linear"], np.random.default_rng(1))
        dnet = Mlp([3, 4, 1], ["relu", "sigmoid"], np.random.default_rng(2))
        x = rng.standard_normal((6, 4))

        def run(lam):
            fnet.zero_grads()
            dnet.zero_grads()
            tape = Tape()
            f = l2_normalize(forward_mlp(fnet, x, tape), tape)
            d = forward_mlp(dnet, grad_reverse(f, lam, tape), tape)
            loss = domain_loss([d], [np.ones(6)], Value(np.full((2, 1), 0.5)), np.zeros(2), tape)
            run_backward(tape, loss)
            return [g.copy() for _, g in fnet.param_arrays()]

        # grad_reverse multiplies by -lam, so lam=-1 is the pass-through run
        plain = run(-1.0)
        flipped = run(0.7)
        for gp, gf in zip(plain, flipped):
            np.testing.assert_allclose(gf, -0.7 * gp, atol=1e-12)


class TestMethodContainment:
    def test_weight_mode_ones_is_bit_identical_to_unweighted_baseline(self):
        from uman.evaluate import METHODS

        datasets, partition, hp = tiny_setup()
        direct = train(datasets, partition, hp, **METHODS["unweighted_adv"])
        again = train(datasets, partition, hp, weight_mode="ones")
        assert direct.trace == again.trace
        for (p, _), (q, _) in zip(
            direct.feature_net.param_arrays(), again.feature_net.param_arrays()
        ):
            np.testing.assert_array_equal(p, q)

    def test_unweighted_run_reports_unit_weights(self):
        datasets, partition, hp = tiny_setup()
        result = train(datasets, partition, hp, weight_mode="ones")
        for r in result.trace:
            assert r.mean_weight_common == 1.0
            assert r.mean_weight_private == 1.0
            assert r.mean_weight_target == 1.0


class TestInference:
    def _trained_pair(self):
        datasets, partition, hp = tiny_setup(max_steps=10)
        result = train(datasets, partition, hp)
        return result, datasets[-1].features[:40], partition

    def test_matches_margin_recomputation(self):
        result, x, partition = self._trained_pair()
        for w0 in (0.0, 0.3, 0.9):
            preds = predict_classes(result.feature_net, result.classifier, x, w0)
            probs = softmax(mlp_apply(result.classifier, extract_features(result.feature_net, x)))
            for i, row in enumerate(probs):
                mr = margin_of(row)
                want = mr.pseudo_label if mr.margin >= w0 else UNKNOWN
                assert preds[i] == want

    def test_threshold_boundary_is_inclusive(self):
        result, x, _ = self._trained_pair()
        probs = softmax(mlp_apply(result.classifier, extract_features(result.feature_net, x)))
        mr = margin_of(probs[0])
        # thresholds come from the same batch forward pass so the boundary
        # comparison is exact, not one BLAS reduction order apart
        at = predict_classes(result.feature_net, result.classifier, x, mr.margin)[0]
        above = predict_classes(
            result.feature_net, result.classifier, x, min(mr.margin + 1e-9, 1.0)
        )[0]
        assert at == mr.pseudo_label
        assert above == UNKNOWN

    def test_w0_zero_never_rejects_and_w0_one_rarely_accepts(self):
        result, x, _ = self._trained_pair()
        always = predict_classes(result.feature_net, result.classifier, x, 0.0)
        assert (always != UNKNOWN).all()

    def test_infer_single_vector(self):
        result, x, _ = self._trained_pair()
        assert infer(result.feature_net, result.classifier, x[0], 0.0) == int(
            predict_classes(result.feature_net, result.classifier, x[:1], 0.0)[0]
        )
        with pytest.raises(ValueError, match="single"):
            infer(result.feature_net, result.classifier, x[:2], 0.5)
