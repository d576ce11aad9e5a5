import hashlib

import numpy as np
import pytest

from netshrink import tensor as T
from netshrink.cost import LatencyTable, synthetic_latency_table, total_resource
from netshrink.data import synth_classification, three_way_split
from netshrink.errors import FeasibilityError, InfeasibleTargetError
from netshrink.search import (
    LogRow,
    SampleRecord,
    SearchConfig,
    evaluate_sample,
    generate_mcd_sample,
    generate_scd_samples,
    iteration_budget,
    layer_max_reduction,
    load_trajectory_choices,
    mcd_max_reduction,
    min_resource_choice,
    reduction_schedule,
    run_search,
    scd_max_reduction,
    search_log_csv,
    select_best,
    shrink_options,
    train_subnetwork,
    train_supernetwork,
    trajectory_replay_finetune,
    write_trajectory,
)
from netshrink.supernet import LayerSpec, SubNetChoice, SuperNetwork, full_width_choice


def small_specs():
    return [
        LayerSpec(index=0, c=3, t=6, k_max=3, stride=1),
        LayerSpec(index=1, c=6, t=6, k_max=5, stride=1),
        LayerSpec(index=2, c=6, t=6, k_max=3, stride=1),
    ]


def six_layer_specs():
    return [
        LayerSpec(index=0, c=3, t=8, k_max=5, stride=1),
        LayerSpec(index=1, c=8, t=8, k_max=3, stride=1),
        LayerSpec(index=2, c=8, t=8, k_max=3, stride=2),
        LayerSpec(index=3, c=8, t=8, k_max=3, stride=1),
        LayerSpec(index=4, c=8, t=4, k_max=3, stride=1),
        LayerSpec(index=5, c=4, t=8, k_max=3, stride=1),
    ]


def make_config(target, **kw):
    base = dict(
        samples_per_iteration=8,
        layers_per_sample=3,
        init_reduction=0.03,
        decay=0.98,
        target_resource=target,
        seed=11,
    )
    base.update(kw)
    return SearchConfig(**base)


def tiny_holdout(seed=0, n_per_class=5, classes=3, hw=6):
    ds = synth_classification(classes, n_per_class, hw, hw, seed=seed, noise=0.3)
    ds.split = "holdout"
    return ds


class TestSchedule:
    def test_paper_percentages(self):
        cfg = make_config(1.0, init_reduction=0.03, decay=0.98)
        assert reduction_schedule(100.0, cfg, 0) == pytest.approx(3.0, rel=1e-12)
        assert reduction_schedule(100.0, cfg, 2) == pytest.approx(2.8812, rel=1e-12)

    def test_decay_one_is_constant(self):
        cfg = make_config(1.0, decay=1.0)
        assert reduction_schedule(50.0, cfg, 0) == reduction_schedule(50.0, cfg, 40)

    def test_negative_iteration_rejected(self):
        with pytest.raises(ValueError):
            reduction_schedule(1.0, make_config(1.0), -1)


class TestShrinkOptions:
    def test_every_option_strictly_shrinks(self):
        spec = LayerSpec(index=0, c=4, t=8, k_max=5, stride=1)
        for opt in shrink_options(spec, 6, 5):
            m2, k2 = opt
            assert m2 <= 6 and (m2 == 0 or k2 <= 5)
            assert (m2, k2) != (6, 5)

    def test_removed_layer_has_no_options(self):
        spec = LayerSpec(index=0, c=4, t=8, k_max=5, stride=1)
        assert shrink_options(spec, 0, 3) == []

    def test_kernel_only_shrink_allowed(self):
        spec = LayerSpec(index=0, c=4, t=8, k_max=5, stride=1)
        assert (8, 3) in shrink_options(spec, 8, 5)


class TestMcdSampling:
    def setup_method(self):
        self.specs = small_specs()
        self.table = synthetic_latency_table(self.specs, (6, 6), seed=1)
        self.full = full_width_choice(self.specs)

    def test_meets_reduction_and_changes_at_most_l_layers(self):
        rng = np.random.default_rng(0)
        r0 = total_resource(self.full, self.table)
        required = 0.05 * r0
        for _ in range(50):
            sample = generate_mcd_sample(self.specs, self.table, self.full, 2, required, rng)
            assert total_resource(sample, self.table) <= r0 - required + 1e-9
            changed = [
                i for i, (a, b) in enumerate(zip(sample.pairs, self.full.pairs)) if a != b
            ]
            assert 1 <= len(changed) <= 2
            for i in changed:
                m0, k0 = self.full.pairs[i]
                m1, k1 = sample.pairs[i]
                assert m1 <= m0 and (m1 == 0 or k1 <= k0)
                assert (m1, k1) != (m0, k0)

    def test_zero_required_reduction_still_requires_a_change(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            sample = generate_mcd_sample(self.specs, self.table, self.full, 1, 0.0, rng)
            assert sample.pairs != self.full.pairs

    def test_single_layer_network_degenerates_to_single_layer_shrink(self):
        specs = [LayerSpec(index=0, c=3, t=8, k_max=3, stride=1)]
        table = synthetic_latency_table(specs, (6, 6), seed=2)
        full = full_width_choice(specs)
        rng = np.random.default_rng(2)
        sample = generate_mcd_sample(specs, table, full, 1, 0.0, rng)
        assert sample.pairs[0][0] <= 8

    def test_escalation_reaches_deep_cuts(self):
        # a cut close to the 3-layer capacity: rejection will often fail, the
        # forced-minimum fallback must still find the (existing) solution
        rng = np.random.default_rng(3)
        capacity = mcd_max_reduction(self.specs, self.table, self.full, 3)
        sample = generate_mcd_sample(
            self.specs, self.table, self.full, 3, 0.999 * capacity, rng, max_attempts=5
        )
        reduction = total_resource(self.full, self.table) - total_resource(sample, self.table)
        assert reduction >= 0.999 * capacity - 1e-9

    def test_infeasible_reduction_raises_with_attempts(self):
        rng = np.random.default_rng(4)
        capacity = mcd_max_reduction(self.specs, self.table, self.full, 2)
        with pytest.raises(FeasibilityError) as err:
            generate_mcd_sample(
                self.specs, self.table, self.full, 2, capacity * 1.5, rng, max_attempts=7
            )
        assert err.value.attempts >= 7


class TestScdSampling:
    def setup_method(self):
        self.specs = small_specs()
        self.table = synthetic_latency_table(self.specs, (6, 6), seed=3)
        self.full = full_width_choice(self.specs)

    def test_each_sample_modifies_exactly_one_layer(self):
        samples = generate_scd_samples(self.specs, self.table, self.full, 0.0)
        assert 1 <= len(samples) <= 3
        for s in samples:
            changed = [i for i, (a, b) in enumerate(zip(s.pairs, self.full.pairs)) if a != b]
            assert len(changed) == 1

    def test_reduction_beyond_single_layer_capacity_yields_empty_list(self):
        capacity = scd_max_reduction(self.specs, self.table, self.full)
        samples = generate_scd_samples(self.specs, self.table, self.full, capacity * 1.01)
        assert samples == []

    def test_full_layer_cut_turns_into_removal(self):
        # demand exactly layer 1's whole latency: only M=0 on layer 1 meets it
        r1 = layer_max_reduction(self.specs, self.table, self.full, 1)
        samples = generate_scd_samples(self.specs, self.table, self.full, r1)
        by_layer = {
            next(i for i, (a, b) in enumerate(zip(s.pairs, self.full.pairs)) if a != b): s
            for s in samples
        }
        assert by_layer[1].pairs[1][0] == 0

    def test_least_shrink_is_chosen_grid_walk(self):
        # oracle: walk the grid and keep the feasible option with max resource
        required = 0.02 * total_resource(self.full, self.table)
        budget = total_resource(self.full, self.table) - required
        samples = generate_scd_samples(self.specs, self.table, self.full, required)
        for s in samples:
            i = next(j for j, (a, b) in enumerate(zip(s.pairs, self.full.pairs)) if a != b)
            r_got = total_resource(s, self.table)
            feasible = [
                total_resource(self.full.replace(i, *o), self.table)
                for o in shrink_options(self.specs[i], *self.full.pairs[i])
            ]
            best = max(r for r in feasible if r <= budget + 1e-9)
            assert r_got == pytest.approx(best)


class TestMcdScdCapacity:
    def test_mcd_exceeds_scd_when_layers_are_small(self):
        specs = small_specs()
        table = synthetic_latency_table(specs, (6, 6), seed=4)
        full = full_width_choice(specs)
        scd_cap = scd_max_reduction(specs, table, full)
        mcd_cap = mcd_max_reduction(specs, table, full, 3)
        assert mcd_cap > scd_cap

    def test_mcd_l1_matches_scd_candidate_support(self):
        # 2-layer net, L=1: MCD samples must live in the exhaustive single-layer
        # candidate set, and both layers must appear in the support
        specs = [
            LayerSpec(index=0, c=3, t=4, k_max=3, stride=1),
            LayerSpec(index=1, c=4, t=4, k_max=3, stride=1),
        ]
        table = synthetic_latency_table(specs, (6, 6), seed=5)
        full = full_width_choice(specs)
        required = 0.05 * total_resource(full, table)
        budget = total_resource(full, table) - required
        exhaustive = set()
        for i, spec in enumerate(specs):
            for o in shrink_options(spec, *full.pairs[i]):
                cand = full.replace(i, *o)
                if total_resource(cand, table) <= budget + 1e-9:
                    exhaustive.add(cand.key())
        rng = np.random.default_rng(6)
        seen_layers = set()
        for _ in range(200):
            s = generate_mcd_sample(specs, table, full, 1, required, rng)
            assert s.key() in exhaustive
            seen_layers.add(
                next(i for i, (a, b) in enumerate(zip(s.pairs, full.pairs)) if a != b)
            )
        assert seen_layers == {0, 1}
        for s in generate_scd_samples(specs, table, full, required):
            assert s.key() in exhaustive


class TestSelection:
    def rec(self, acc, res, it=0):
        return SampleRecord(SubNetChoice(((1, 3),)), res, acc, it)

    def test_singleton(self):
        r = self.rec(0.5, 10.0)
        assert select_best([r]) is r

    def test_accuracy_wins(self):
        assert select_best([self.rec(0.4, 1.0), self.rec(0.6, 9.0)]).holdout_accuracy == 0.6

    def test_tie_breaks_on_lower_resource(self):
        assert select_best([self.rec(0.5, 10.0), self.rec(0.5, 9.0)]).resource == 9.0

    def test_full_tie_keeps_first(self):
        a, b = self.rec(0.5, 9.0), self.rec(0.5, 9.0)
        assert select_best([a, b]) is a

    def test_matches_linear_scan_oracle(self):
        rng = np.random.default_rng(7)
        records = [
            self.rec(float(rng.choice([0.2, 0.5, 0.8])), float(rng.integers(1, 20)))
            for _ in range(50)
        ]
        got = select_best(records)
        want = records[0]
        for r in records[1:]:
            if (r.holdout_accuracy, -r.resource) > (want.holdout_accuracy, -want.resource):
                want = r
        assert got is want

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            select_best([])


class TestEvaluation:
    def test_repeat_evaluation_identical_and_read_only(self):
        specs = small_specs()
        net = SuperNetwork(specs, (6, 6), 3, rng=np.random.default_rng(8))
        holdout = tiny_holdout(seed=1)
        choice = SubNetChoice(((3, 3), (4, 3), (2, 3)))
        before = hashlib.sha256(
            b"".join(p.value.tobytes() for p in net.parameters())
        ).hexdigest()
        a1 = evaluate_sample(net, choice, holdout)
        a2 = evaluate_sample(net, choice, holdout)
        after = hashlib.sha256(
            b"".join(p.value.tobytes() for p in net.parameters())
        ).hexdigest()
        assert a1 == a2
        assert before == after

    def test_single_item_holdout_in_zero_one(self):
        specs = small_specs()
        net = SuperNetwork(specs, (6, 6), 3, rng=np.random.default_rng(9))
        holdout = tiny_holdout(seed=2)
        holdout.images, holdout.labels = holdout.images[:1], holdout.labels[:1]
        assert evaluate_sample(net, net.full_choice(), holdout) in (0.0, 1.0)

    def test_equals_extracted_network_evaluation(self):
        specs = small_specs()
        net = SuperNetwork(specs, (6, 6), 3, rng=np.random.default_rng(10))
        holdout = tiny_holdout(seed=3)
        for pairs in [((3, 3), (0, 3), (6, 3)), ((6, 3), (2, 5), (4, 3))]:
            choice = SubNetChoice(pairs)
            direct = evaluate_sample(net, choice, holdout)
            extracted = net.extract(choice).evaluate(holdout.images, holdout.labels)
            assert direct == extracted


class TestRunSearch:
    def build(self, seed=0):
        specs = six_layer_specs()
        net = SuperNetwork(specs, (8, 8), 3, rng=np.random.default_rng(seed))
        table = synthetic_latency_table(specs, (8, 8), seed=20)
        holdout = tiny_holdout(seed=4, hw=8)
        return net, table, holdout

    def test_contract_on_toy_net(self):
        net, table, holdout = self.build()
        r0 = total_resource(net.full_choice(), table)
        cfg = make_config(0.5 * r0)
        result = run_search(net, table, cfg, holdout)
        resources = [rec.resource for rec in result.trajectory]
        assert all(b < a for a, b in zip(resources, resources[1:]))
        assert resources[-1] <= cfg.target_resource + 1e-9
        assert result.trajectory[0].iteration == -1
        # every logged sample satisfies its iteration's budget
        min_res = total_resource(min_resource_choice(net.specs), table)
        for row in result.log_rows:
            prev = resources[row.iteration]  # trajectory[it] is best of iteration it-1
            budget = iteration_budget(prev, r0, cfg, row.iteration, min_res)
            assert row.resource <= budget + 1e-9
        # J rows per iteration, exactly one chosen per iteration
        iterations = resources and len(resources) - 1
        assert len(result.log_rows) == iterations * cfg.samples_per_iteration
        for it in range(iterations):
            rows = [r for r in result.log_rows if r.iteration == it]
            assert sum(r.chosen for r in rows) == 1
            chosen = next(r for r in rows if r.chosen)
            assert chosen.duplicate_of is None

    def test_rerun_with_same_seed_is_byte_identical(self, tmp_path):
        outputs = []
        for _ in range(2):
            net, table, holdout = self.build(seed=3)
            r0 = total_resource(net.full_choice(), table)
            cfg = make_config(0.5 * r0, seed=21)
            result = run_search(net, table, cfg, holdout)
            log = search_log_csv(result.log_rows)
            path = tmp_path / f"traj_{len(outputs)}.json"
            write_trajectory(path, net, result.trajectory)
            outputs.append((log, path.read_bytes()))
        assert outputs[0][0] == outputs[1][0]
        assert outputs[0][1] == outputs[1][1]

    def test_target_equal_to_initial_means_zero_iterations(self):
        net, table, holdout = self.build()
        r0 = total_resource(net.full_choice(), table)
        result = run_search(net, table, make_config(r0), holdout)
        assert len(result.trajectory) == 1
        assert result.log_rows == []

    def test_infeasible_target_preflight(self):
        net, table, holdout = self.build()
        min_res = total_resource(min_resource_choice(net.specs), table)
        with pytest.raises(InfeasibleTargetError):
            run_search(net, table, make_config(min_res * 0.5), holdout)

    def test_weights_untouched_by_search(self):
        net, table, holdout = self.build()
        before = {p.name: p.value.copy() for p in net.parameters()}
        r0 = total_resource(net.full_choice(), table)
        run_search(net, table, make_config(0.7 * r0), holdout)
        for p in net.parameters():
            np.testing.assert_array_equal(p.value, before[p.name])

    def test_parallel_evaluation_matches_serial(self):
        net, table, holdout = self.build(seed=5)
        r0 = total_resource(net.full_choice(), table)
        cfg = make_config(0.6 * r0, seed=22)
        serial = run_search(net, table, cfg, holdout, jobs=1)
        parallel = run_search(net, table, cfg, holdout, jobs=4)
        assert search_log_csv(serial.log_rows) == search_log_csv(parallel.log_rows)

    def test_scd_search_also_terminates(self):
        net, table, holdout = self.build(seed=6)
        r0 = total_resource(net.full_choice(), table)
        cfg = make_config(0.8 * r0, seed=23)
        result = run_search(net, table, cfg, holdout, optimizer="scd")
        assert result.trajectory[-1].resource <= cfg.target_resource + 1e-9

    def test_trajectory_file_round_trip(self, tmp_path):
        net, table, holdout = self.build(seed=7)
        r0 = total_resource(net.full_choice(), table)
        result = run_search(net, table, make_config(0.7 * r0, seed=24), holdout)
        path = tmp_path / "trajectory.json"
        write_trajectory(path, net, result.trajectory)
        choices = load_trajectory_choices(path, net)
        assert [c.key() for c in choices] == [r.choice.key() for r in result.trajectory]


class TestTraining:
    def separable_data(self, seed=0):
        ds = synth_classification(3, 40, 6, 6, seed=seed, noise=0.15)
        return three_way_split(ds, holdout_fraction=0.15, test_fraction=0.15, seed=seed)

    def test_degenerate_width_grid_is_ordinary_training(self):
        specs = [
            LayerSpec(index=0, c=3, t=6, k_max=3, stride=1, width_grid=(6,)),
            LayerSpec(index=1, c=6, t=6, k_max=3, stride=1, width_grid=(6,)),
        ]
        net = SuperNetwork(specs, (6, 6), 3, rng=np.random.default_rng(12))
        train, holdout, _ = self.separable_data(seed=9)
        history = train_supernetwork(
            net, train, epochs=3, rng=np.random.default_rng(0), batch_size=16,
            holdout=holdout, debug_checks=True,
        )
        assert history[-1]["loss"] < history[0]["loss"]

    def test_gradient_isolation_holds_every_step(self):
        specs = small_specs()
        net = SuperNetwork(specs, (6, 6), 3, rng=np.random.default_rng(13))
        train, _, _ = self.separable_data(seed=10)
        # debug_checks raises on any leak past the per-batch max width
        train_supernetwork(
            net, train, epochs=2, rng=np.random.default_rng(1), batch_size=16,
            debug_checks=True,
        )

    def test_separable_task_reaches_high_full_width_accuracy(self):
        specs = small_specs()
        net = SuperNetwork(specs, (6, 6), 3, rng=np.random.default_rng(14))
        train, holdout, test = self.separable_data(seed=11)
        train_supernetwork(
            net, train, epochs=25, rng=np.random.default_rng(2), batch_size=16,
            lr=0.08, holdout=holdout,
        )
        acc = net.evaluate(test.images, test.labels, net.full_choice())
        assert acc >= 0.9

    def test_same_seed_same_weights(self):
        results = []
        for _ in range(2):
            specs = small_specs()
            net = SuperNetwork(specs, (6, 6), 3, rng=np.random.default_rng(15))
            train, _, _ = self.separable_data(seed=12)
            train_supernetwork(net, train, epochs=2, rng=np.random.default_rng(3), batch_size=16)
            results.append(np.concatenate([p.value.ravel() for p in net.parameters()]))
        np.testing.assert_array_equal(results[0], results[1])


class TestReplay:
    def test_length_one_trajectory_equals_plain_training(self):
        specs = small_specs()
        train, _, _ = TestTraining().separable_data(seed=13)
        net = SuperNetwork(specs, (6, 6), 3, rng=np.random.default_rng(16))
        replayed = trajectory_replay_finetune(
            net, [net.full_choice()], train, np.random.default_rng(4),
            epochs_per_step=2, final_epochs=3, batch_size=16,
        )
        plain = net.extract(net.full_choice())
        train_subnetwork(plain, train, 3, np.random.default_rng(4), batch_size=16)
        for a, b in zip(replayed.parameters(), plain.parameters()):
            np.testing.assert_array_equal(a.value, b.value)

    def test_replay_walks_and_shrinks(self):
        specs = small_specs()
        train, _, _ = TestTraining().separable_data(seed=14)
        net = SuperNetwork(specs, (6, 6), 3, rng=np.random.default_rng(17))
        choices = [
            net.full_choice(),
            SubNetChoice(((5, 3), (6, 5), (6, 3))),
            SubNetChoice(((5, 3), (4, 3), (3, 3))),
        ]
        final = trajectory_replay_finetune(
            net, choices, train, np.random.default_rng(5),
            epochs_per_step=1, final_epochs=1, batch_size=16,
        )
        assert final.choice.key() == choices[-1].key()
        x = train.images[:4]
        assert final.forward(x).shape == (4, 3)


class TestLogFormat:
    def test_csv_shape_and_version_line(self):
        rows = [
            LogRow(0, 0, 3.25, 0.5, 1, None),
            LogRow(0, 1, 3.0, 0.5, 0, 0),
        ]
        text = search_log_csv(rows)
        lines = text.strip().split("\n")
        assert lines[0] == "# netshrink-search-log-v1"
        assert lines[1] == "iteration,sample_id,resource,accuracy,chosen,duplicate_of"
        assert lines[2] == "0,0,3.25,0.5,1,"
        assert lines[3] == "0,1,3.0,0.5,0,0"
