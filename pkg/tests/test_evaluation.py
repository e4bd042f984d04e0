import json

import numpy as np
import pytest

from selfbc import envs
from selfbc.dataset import OfflineDataset, compute_norm_stats
from selfbc.evaluation import (
    METRIC_FIELDS,
    Evaluator,
    MetricsRecord,
    MetricsWriter,
    dataset_bc_mse,
    evaluate_policy,
    normalized_score,
    read_metrics_csv,
    write_metrics,
)
from selfbc.numerics import InvalidInputError, MlpParams, init_mlp, mlp_forward, param_count
from selfbc.rng import make_stream


def zero_policy():
    return MlpParams((4, 8, 2), np.zeros(param_count((4, 8, 2))), "tanh")


def linear_policy(W, b):
    return MlpParams((4, 2), np.concatenate([W.ravel(), b]), "identity")


def linear_dataset(W, b, delta=0.0, n=500, seed=0):
    rng = np.random.default_rng(seed)
    s = rng.uniform(-1, 1, (n, 4))
    return OfflineDataset(s, s @ W + b + delta, np.zeros(n), s, np.zeros(n, bool))


class TestEvaluatePolicy:
    def test_zero_policy_closed_form(self):
        # zero action from rest: the point never moves, so each step pays -|p - g|
        start = envs.pointmass_reset(make_stream(7, "eval"), 10)
        expected = -envs.HORIZON * np.linalg.norm(start.position - envs.GOAL, axis=1).mean()
        assert abs(evaluate_policy(zero_policy(), None, 10, seed=7) - expected) < 1e-10

    def test_deterministic(self, small_dataset):
        norm = compute_norm_stats(small_dataset)
        pol = init_mlp((4, 8, 2), make_stream(0, "init"), "tanh")
        assert evaluate_policy(pol, norm, 3, 1) == evaluate_policy(pol, norm, 3, 1)

    def test_does_not_mutate_policy(self, small_dataset):
        norm = compute_norm_stats(small_dataset)
        pol = init_mlp((4, 8, 2), make_stream(0, "init"), "tanh")
        before = pol.flat.copy()
        Evaluator(small_dataset, norm, n_episodes=2)(pol, 0)
        assert np.array_equal(pol.flat, before)

    def test_rejects_zero_episodes(self):
        with pytest.raises(InvalidInputError):
            evaluate_policy(zero_policy(), None, 0)


class TestNormalizedScore:
    def test_endpoints(self):
        assert normalized_score(-50.0, -50.0, -10.0) == 0.0
        assert normalized_score(-10.0, -50.0, -10.0) == 100.0

    def test_affine_increasing(self):
        xs = np.linspace(-80, 0, 9)
        ys = np.array([normalized_score(x, -50.0, -10.0) for x in xs])
        assert np.all(np.diff(ys) > 0)
        np.testing.assert_allclose(np.diff(ys, 2), 0.0, atol=1e-12)

    def test_bad_refs(self):
        with pytest.raises(InvalidInputError):
            normalized_score(0.0, -10.0, -10.0)
        with pytest.raises(InvalidInputError):
            normalized_score(0.0, -5.0, -10.0)

    def test_frozen_refs_ordered(self):
        refs = envs.load_reference_returns()
        assert refs["n_episodes"] == 100 and refs["expert_ref"] > refs["random_ref"]


class TestBcMse:
    W = np.array([[0.2, -0.1], [0.0, 0.3], [0.1, 0.1], [-0.2, 0.05]])
    b = np.array([0.05, -0.02])

    def test_exact_reproduction(self):
        assert dataset_bc_mse(linear_policy(self.W, self.b), linear_dataset(self.W, self.b), None) < 1e-30

    def test_constant_offset(self):
        ds = linear_dataset(self.W, self.b, delta=0.3)
        assert abs(dataset_bc_mse(linear_policy(self.W, self.b), ds, None) - 2 * 0.3**2) < 1e-14

    def test_streaming_oracle(self, small_dataset):
        norm = compute_norm_stats(small_dataset)
        pol = init_mlp((4, 8, 2), make_stream(5, "init"), "tanh")
        # accumulate in reverse order, one row at a time
        acc = 0.0
        for i in reversed(range(small_dataset.n)):
            out = mlp_forward(pol, norm.normalize(small_dataset.states[i]))
            acc += float(np.sum((out - small_dataset.actions[i]) ** 2))
        assert abs(dataset_bc_mse(pol, small_dataset, norm) - acc / small_dataset.n) < 1e-12

    def test_row_order_invariant(self, small_dataset):
        norm = compute_norm_stats(small_dataset)
        pol = init_mlp((4, 8, 2), make_stream(6, "init"), "tanh")
        perm = np.random.default_rng(0).permutation(small_dataset.n)
        shuffled = OfflineDataset(small_dataset.states[perm], small_dataset.actions[perm],
                                  small_dataset.rewards[perm], small_dataset.next_states[perm],
                                  small_dataset.dones[perm])
        a, b = dataset_bc_mse(pol, small_dataset, norm), dataset_bc_mse(pol, shuffled, norm)
        assert abs(a - b) <= 1e-14 * a

    def test_log10(self):
        assert MetricsRecord(0, 0.0, 0.0, 0.01).log10_bc_mse == pytest.approx(-2.0)


def records():
    return [MetricsRecord(0, -31.123456789012345, 12.5, 0.1 + 0.2),
            MetricsRecord(10, -1e-300, 1 / 3, 2.0**-40, 1.5)]


class TestMetricsFiles:
    def test_empty_stream(self, tmp_path):
        write_metrics([], tmp_path / "m.csv", tmp_path / "m.jsonl")
        assert (tmp_path / "m.csv").read_text() == ",".join(METRIC_FIELDS) + "\n"
        assert (tmp_path / "m.jsonl").read_text() == ""

    def test_header_exact(self, tmp_path):
        write_metrics(records(), tmp_path / "m.csv", tmp_path / "m.jsonl")
        first = (tmp_path / "m.csv").read_text().splitlines()[0]
        assert first == "step,mean_return,normalized_score,dataset_bc_mse,wall_seconds"

    def test_csv_round_trip(self, tmp_path):
        write_metrics(records(), tmp_path / "m.csv", tmp_path / "m.jsonl")
        assert read_metrics_csv(tmp_path / "m.csv") == records()

    def test_jsonl_keys(self, tmp_path):
        write_metrics(records(), tmp_path / "m.csv", tmp_path / "m.jsonl")
        lines = [json.loads(x) for x in (tmp_path / "m.jsonl").read_text().splitlines()]
        assert len(lines) == 2 and all(tuple(x) == METRIC_FIELDS for x in lines)
        assert lines[0]["mean_return"] == records()[0].mean_return

    def test_flush_per_record(self, tmp_path):
        with MetricsWriter(tmp_path / "m.csv", tmp_path / "m.jsonl") as w:
            w.write(records()[0])
            assert len((tmp_path / "m.csv").read_text().splitlines()) == 2
            assert len((tmp_path / "m.jsonl").read_text().splitlines()) == 1

    def test_collision(self, tmp_path):
        write_metrics([], tmp_path / "m.csv", tmp_path / "m.jsonl")
        with pytest.raises(FileExistsError):
            write_metrics(records(), tmp_path / "m.csv", tmp_path / "other.jsonl")

    def test_decreasing_step(self, tmp_path):
        with MetricsWriter(tmp_path / "m.csv", tmp_path / "m.jsonl") as w:
            w.write(MetricsRecord(5, 0.0, 0.0, 0.0))
            with pytest.raises(InvalidInputError):
                w.write(MetricsRecord(4, 0.0, 0.0, 0.0))

    def test_bad_header(self, tmp_path):
        (tmp_path / "m.csv").write_text("step,foo\n")
        with pytest.raises(InvalidInputError):
            read_metrics_csv(tmp_path / "m.csv")
