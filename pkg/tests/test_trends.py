import pytest

from hetloco import verify
from hetloco.model import ModelConfig, parameter_count


def test_trend_plan_covers_every_gated_preset_on_three_seeds():
    runs = verify.trend_plan()
    seeds = {}
    for run in runs:
        seeds.setdefault(run.label, set()).add(run.seed)
        assert run.cluster.outer.replicas == 4
        assert run.cluster.outer.inner_steps == 10
        assert run.cluster.rounds == 60
    for preset in ("baseline", "het_half", "pp_compress"):
        assert seeds[preset] == {0, 1, 2}
    assert seeds["pp_compress_1_32"] == {0}
    assert {r.cluster.compressed_ratio for r in runs if r.label.startswith("pp_compress")} == {0.125, 1 / 32}


def test_trend_plan_fits_the_flop_budget():
    runs = verify.trend_plan()
    per_run = 6.0 * parameter_count(verify.TREND_MODEL) * 60 * 4 * 10 * verify.TREND_BATCH * verify.TREND_MODEL.seq_len
    assert verify.plan_flops(runs) == pytest.approx(len(runs) * per_run)
    assert verify.plan_flops(runs) <= verify.TREND_FLOP_BUDGET
    desk = [verify.TrendRun(r.label, r.seed, r.cluster.model_copy(update={"model": ModelConfig(), "batch_size": 8})) for r in runs]
    assert verify.plan_flops(desk) > verify.TREND_FLOP_BUDGET


@pytest.mark.slow
def test_training_trends():
    (result,) = verify.run_checks(["training_trends"], slow=True)
    assert result.passed, result.detail
