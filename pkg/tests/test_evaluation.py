import math

import numpy as np
import pytest

from latact import world
from latact.evaluation import (AblationReport, EvalReport, PolicyAgent,
                               RandomAgent, RolloutRecord, ScenarioSpec,
                               ScriptedAgent, default_scenarios, emit_report,
                               evaluate, fit_power_law, parse_report_csv,
                               quality_ablation, run_scaling_study,
                               subsample_episodes)

SEEN = [ScenarioSpec("seen")]


# ---------------------------------------------------------------------------
# evaluate()


def test_scripted_agent_scores_one_on_seen():
    report = evaluate({"scripted": ScriptedAgent()}, ["pick", "push"], SEEN,
                      n_rollouts=10, base_seed=3)
    assert report.mean_score() == 1.0
    assert len(report.records) == 2 * 10


def test_random_agent_scores_low_on_pick():
    report = evaluate({"random": RandomAgent()}, ["pick"], SEEN,
                      n_rollouts=10, base_seed=3)
    assert report.mean_score() < 0.2


def test_mean_equals_arithmetic_average():
    report = evaluate({"scripted": ScriptedAgent(), "random": RandomAgent()},
                      ["place"], SEEN, n_rollouts=10, base_seed=0)
    for t, s, m in report.groups():
        scores = report.scores(t, s, m)
        assert len(scores) == 10
        assert report.mean_score(t, s, m) == sum(scores) / len(scores)


def test_rollout_seeds_are_base_plus_i():
    report = evaluate({"scripted": ScriptedAgent()}, ["pick"], SEEN,
                      n_rollouts=5, base_seed=42)
    assert sorted(r.seed for r in report.records) == list(range(42, 47))


def test_evaluation_seed_reproducible():
    a = evaluate({"random": RandomAgent()}, ["push"], SEEN, n_rollouts=5, base_seed=9)
    b = evaluate({"random": RandomAgent()}, ["push"], SEEN, n_rollouts=5, base_seed=9)
    assert a.records == b.records


def test_agent_failure_scores_zero_and_flagged():
    class Exploding:
        method = "boom"

        def begin(self, seed, task):
            pass

        def act(self, state, obs, task):
            raise RuntimeError("crash")

    report = evaluate({"boom": Exploding()}, ["pick"], SEEN, n_rollouts=3, base_seed=0)
    assert all(r.score == 0.0 and r.flagged for r in report.records)
    assert len(report.records) == 3


def test_scenario_kinds():
    kinds = {s.kind for s in default_scenarios()}
    assert kinds == {"seen", "position-shift", "visual-distractor", "language-variant"}
    with pytest.raises(ValueError):
        ScenarioSpec("upside-down")


# ---------------------------------------------------------------------------
# fit_power_law


def test_fit_exact_power_law():
    points = [(n, 0.1 * n ** 0.3) for n in (100, 1000, 10_000)]
    fit = fit_power_law(points)
    assert abs(fit.exponent - 0.3) < 1e-9
    assert abs(fit.coefficient - 0.1) < 1e-9
    assert fit.pearson_r == pytest.approx(1.0)


def test_two_points_give_r_plus_minus_one():
    assert fit_power_law([(10, 0.2), (100, 0.4)]).pearson_r == pytest.approx(1.0)
    assert fit_power_law([(10, 0.4), (100, 0.2)]).pearson_r == pytest.approx(-1.0)


def test_fit_rejects_non_positive():
    with pytest.raises(ValueError):
        fit_power_law([(10, 0.0), (100, 0.5)])
    with pytest.raises(ValueError):
        fit_power_law([(-10, 0.1), (100, 0.5)])
    with pytest.raises(ValueError):
        fit_power_law([(10, 0.1)])


def grid_search_fit(points):
    """Brute-force (a, b) minimizing log-space squared error."""
    log_n = np.log([p[0] for p in points])
    log_s = np.log([p[1] for p in points])
    best = (None, None, math.inf)
    for b in np.arange(-1.0, 1.0, 0.001):
        # optimal log a given b is the mean residual
        log_a = float(np.mean(log_s - b * log_n))
        err = float(np.sum((log_s - (log_a + b * log_n)) ** 2))
        if err < best[2]:
            best = (math.exp(log_a), b, err)
    return best[0], best[1]


@pytest.mark.parametrize("noise", [0.0, 0.05])
def test_fit_agrees_with_grid_search_oracle(noise):
    rng = np.random.default_rng(13)
    true_b = 0.27
    points = []
    for n in (10, 100, 1000, 10_000):
        s = 0.05 * n ** true_b
        if noise:
            s *= float(np.exp(rng.normal(0.0, noise)))
        points.append((float(n), s))
    fit = fit_power_law(points)
    a_g, b_g = grid_search_fit(points)
    assert abs(fit.exponent - b_g) < 2e-3  # within grid resolution
    assert abs(fit.exponent - true_b) < 0.05


# ---------------------------------------------------------------------------
# Subsampling and the scaling study


def test_subsample_whole_episodes_nested():
    items = list(range(100))
    small = subsample_episodes(items, 0.1, seed=5)
    big = subsample_episodes(items, 0.5, seed=5)
    assert len(small) == 10 and len(big) == 50
    assert set(small) <= set(big)  # prefix nesting
    assert subsample_episodes(items, 1.0, seed=5) == items
    with pytest.raises(ValueError):
        subsample_episodes(items, 0.0, seed=5)


def test_subsample_deterministic():
    items = list(range(50))
    assert subsample_episodes(items, 0.3, 7) == subsample_episodes(items, 0.3, 7)
    assert subsample_episodes(items, 0.3, 7) != subsample_episodes(items, 0.3, 8)


def test_scaling_study_records_training_failures():
    calls = []

    def trainer(manifests, seed):
        calls.append(len(manifests))
        if len(manifests) < 5:
            raise RuntimeError("not enough data")
        return ScriptedAgent()

    fit, reports = run_scaling_study(list(range(10)), trainer, ["pick"],
                                     fractions=(0.1, 0.5, 1.0), n_rollouts=2)
    assert len(fit.failures) == 1
    assert "0.1" in fit.failures[0]
    assert set(reports) == {0.5, 1.0}
    assert len(fit.points) == 2


def test_scaling_study_with_perfect_trainer():
    fit, reports = run_scaling_study(
        list(range(20)), lambda m, s: ScriptedAgent(), ["pick"],
        fractions=(0.5, 1.0), n_rollouts=2)
    assert [p[0] for p in fit.points] == [10.0, 20.0]
    assert all(p[1] == 1.0 for p in fit.points)


# ---------------------------------------------------------------------------
# Quality ablation


def test_identical_sets_delta_zero():
    result = quality_ablation(["a", "b"], ["a", "b"],
                              lambda m, s: ScriptedAgent(), ["pick"], n_rollouts=2)
    assert result.delta == 0.0


def test_partial_overlap_rejected():
    with pytest.raises(ValueError):
        quality_ablation(["a", "b"], ["b", "c"], lambda m, s: ScriptedAgent(),
                         ["pick"], n_rollouts=1)
    with pytest.raises(ValueError):
        quality_ablation([], ["a"], lambda m, s: ScriptedAgent(), ["pick"])


def test_ablation_delta_recomputes_from_rollouts():
    def trainer(manifests, seed):
        return ScriptedAgent() if "good" in manifests else RandomAgent()

    result = quality_ablation(["good"], ["bad"], trainer, ["pick"], n_rollouts=4)
    v = result.report_verified.mean_score()
    u = result.report_unverified.mean_score()
    assert result.delta == v - u
    assert result.delta > 0


# ---------------------------------------------------------------------------
# Report emission


@pytest.fixture()
def small_report():
    return evaluate({"scripted": ScriptedAgent(), "random": RandomAgent()},
                    ["pick"], SEEN, n_rollouts=3, base_seed=1)


def test_emit_report_round_trip(tmp_path, small_report):
    files = emit_report(small_report, tmp_path)
    back = parse_report_csv(tmp_path / "scores.csv")
    assert [(r.task, r.scenario, r.method, r.seed, r.score) for r in back.records] \
        == [(r.task, r.scenario, r.method, r.seed, r.score)
            for r in sorted(small_report.records,
                            key=lambda r: (r.task, r.scenario, r.method, r.seed))]
    for f in files:
        assert f.stat().st_size > 0
    assert (tmp_path / "scores.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_emit_report_deterministic_bytes(tmp_path, small_report):
    emit_report(small_report, tmp_path / "a")
    emit_report(small_report, tmp_path / "b")
    assert ((tmp_path / "a" / "scores.csv").read_bytes()
            == (tmp_path / "b" / "scores.csv").read_bytes())


def test_emit_scaling_plot(tmp_path):
    fit = fit_power_law([(10, 0.1), (100, 0.2), (1000, 0.4)])
    report = EvalReport(records=[RolloutRecord("pick", "seen", "full", 0, 0.5)])
    files = emit_report(report, tmp_path, scaling=fit)
    assert (tmp_path / "scaling.png").exists()
    assert (tmp_path / "scaling.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_csv_17_digit_round_trip(tmp_path):
    score = 1.0 / 3.0
    report = EvalReport(records=[RolloutRecord("pick", "seen", "m", 0, score)])
    emit_report(report, tmp_path)
    back = parse_report_csv(tmp_path / "scores.csv")
    assert back.records[0].score == score  # bit-exact through the table
