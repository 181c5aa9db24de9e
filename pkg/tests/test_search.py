"""Strategy grids: expansion, validation, execution order, failure recording,
best-row flagging, and report serialization."""

import dataclasses

import pytest

from affmtl.data import split_by_video, synth_corpus
from affmtl.errors import ConfigError
from affmtl.search import (
    SearchRow,
    StrategySpec,
    parse_grid,
    report_from_csv,
    report_to_csv,
    report_to_markdown,
    run_search,
)
from affmtl.training import TrainConfig, extract_bank, train_single


@pytest.fixture(scope="module")
def corpus():
    records, features = synth_corpus(7, num_videos=4, frames_per_video=60)
    train, val = split_by_video(records, 0.25)
    return records, features, train, val


@pytest.fixture(scope="module")
def au_bank(corpus):
    _, features, train, val = corpus
    res = train_single("AU", TrainConfig(seed=0, max_epochs=1), train, val, features)
    return extract_bank(res.checkpoint, train + val, features)


# Instant strategy runs: max_epochs=0 scores the initialized model, which is
# deterministic per seed and fast enough to execute real grids in tests.
BASE = TrainConfig(max_epochs=0, init_from="scratch")


class TestStrategySpec:
    def test_valid_spec_passes(self):
        StrategySpec("V", ("AU",), ("V", "A"), True, 5, 5).validate()

    @pytest.mark.parametrize(
        "spec",
        [
            StrategySpec("XY", (), ("XY",), False, 1, 1),
            StrategySpec("V", (), ("A",), False, 1, 1),
            StrategySpec("V", (), ("A", "V"), False, 1, 1),
            StrategySpec("V", ("V",), ("V",), False, 1, 1),
            StrategySpec("V", (), ("V",), True, 1, 1),
            StrategySpec("V", (), ("V",), False, 5, 5),
        ],
    )
    def test_invalid_specs_rejected(self, spec):
        with pytest.raises(ConfigError):
            spec.validate()

    def test_to_config_carries_strategy(self):
        spec = StrategySpec("V", ("AU",), ("V", "A"), True, 5, 5)
        cfg = spec.to_config(TrainConfig(max_epochs=3, learning_rate=2e-3), seed=4)
        assert cfg.tasks == ("V", "A")
        assert cfg.fusion_sources == ("AU",)
        assert (cfg.temporal, cfg.seq_len, cfg.stride) == (True, 5, 5)
        assert cfg.seed == 4
        assert cfg.max_epochs == 3 and cfg.learning_rate == 2e-3


class TestParseGrid:
    def grid(self, **targets):
        return {"targets": targets or {"V": {}}}

    def test_cross_product_count(self):
        grid = self.grid(V={
            "fusion_subsets": [[], ["AU"]],
            "joint_sets": [["V"], ["V", "A"]],
            "windows": [[1, 1], [5, 5]],
        })
        specs, seeds, overrides, skipped = parse_grid(grid)
        assert len(specs) == 8
        assert seeds == [0] and overrides == {} and skipped == []

    def test_defaults_give_one_single_frame_spec(self):
        specs, _, _, _ = parse_grid(self.grid())
        assert specs == [StrategySpec("V", (), ("V",), False, 1, 1)]

    def test_expansion_order_deterministic(self):
        grid = self.grid(V={
            "fusion_subsets": [["AU"], ["EXPR"]],
            "windows": [[1, 1], [5, 5], [10, 10]],
        })
        assert parse_grid(grid)[0] == parse_grid(grid)[0]

    def test_invalid_combination_skipped_not_fatal(self):
        grid = self.grid(V={"fusion_subsets": [[], ["V"]]})
        specs, _, _, skipped = parse_grid(grid)
        assert len(specs) == 1
        assert len(skipped) == 1 and "cannot fuse its own bank" in skipped[0]

    def test_joint_set_missing_target_skipped(self):
        grid = self.grid(V={"joint_sets": [["V", "A"], ["A"]]})
        specs, _, _, skipped = parse_grid(grid)
        assert [s.joint_tasks for s in specs] == [("V", "A")]
        assert len(skipped) == 1

    def test_target_leads_joint_set(self):
        grid = self.grid(A={"joint_sets": [["V", "A"]]})
        specs, _, _, _ = parse_grid(grid)
        assert specs[0].joint_tasks == ("A", "V")

    def test_unknown_grid_key_named(self):
        with pytest.raises(ConfigError, match="targett"):
            parse_grid({"targett": {}, "targets": {"V": {}}})

    def test_unknown_target_key_named(self):
        with pytest.raises(ConfigError, match="window"):
            parse_grid(self.grid(V={"window": [[1, 1]]}))

    def test_unknown_target_task(self):
        with pytest.raises(ConfigError, match="VA"):
            parse_grid(self.grid(VA={}))

    def test_missing_targets_table(self):
        with pytest.raises(ConfigError, match="targets"):
            parse_grid({})

    def test_bad_seeds(self):
        for seeds in ([], [0.5], "0"):
            with pytest.raises(ConfigError, match="seeds"):
                parse_grid({"targets": {"V": {}}, "seeds": seeds})

    def test_all_combinations_invalid_is_fatal(self):
        with pytest.raises(ConfigError, match="zero valid"):
            parse_grid(self.grid(V={"joint_sets": [["A"]]}))

    def test_train_overrides_passed_through(self):
        grid = {"targets": {"V": {}}, "train": {"learning_rate": 5e-4}}
        assert parse_grid(grid)[2] == {"learning_rate": 5e-4}


class TestRunSearch:
    def test_rows_in_grid_order_with_per_seed_scores(self, corpus):
        _, features, train, val = corpus
        specs, seeds, _, _ = parse_grid({
            "targets": {"V": {"windows": [[1, 1], [5, 5]]}},
            "seeds": [0, 1],
        })
        report = run_search(specs, seeds, BASE, train, val, features, {})
        assert [r.spec for r in report.rows] == specs
        assert report.seeds == [0, 1]
        for row in report.rows:
            assert len(row.scores) == 2
            assert all(isinstance(s, float) for s in row.scores)
            assert row.mean == pytest.approx(sum(row.scores) / 2)

    def test_failed_runs_recorded_not_fatal(self, corpus):
        _, features, train, val = corpus
        specs = [
            StrategySpec("V", ("AU",), ("V",), False, 1, 1),  # no bank -> fails
            StrategySpec("V", (), ("V",), False, 1, 1),
        ]
        report = run_search(specs, [0], BASE, train, val, features, {})
        failed, ok = report.rows
        assert isinstance(failed.scores[0], str) and failed.scores[0].startswith("error:")
        assert failed.mean is None and failed.best is False
        assert isinstance(ok.scores[0], float)
        assert ok.best is True

    def test_one_best_row_per_target(self, corpus, au_bank):
        _, features, train, val = corpus
        specs, seeds, _, _ = parse_grid({
            "targets": {
                "V": {"fusion_subsets": [[], ["AU"]]},
                "EXPR": {"fusion_subsets": [[], ["AU"]]},
            },
            "seeds": [0],
        })
        report = run_search(specs, seeds, BASE, train, val, features,
                            {"AU": au_bank})
        for target in ("V", "EXPR"):
            rows = [r for r in report.rows if r.spec.target == target]
            assert sum(r.best for r in rows) == 1
            best = next(r for r in rows if r.best)
            assert best.mean == max(r.mean for r in rows)

    def test_tied_rows_prefer_grid_order(self, corpus):
        """Duplicate grid points score identically; the earlier row wins."""
        _, features, train, val = corpus
        spec = StrategySpec("V", (), ("V",), False, 1, 1)
        report = run_search([spec, spec], [0], BASE, train, val, features, {})
        assert report.rows[0].scores == report.rows[1].scores
        assert [r.best for r in report.rows] == [True, False]

    def test_parallel_jobs_reproduce_serial_report(self, corpus, au_bank):
        _, features, train, val = corpus
        specs, seeds, _, _ = parse_grid({
            "targets": {"V": {"fusion_subsets": [[], ["AU"]],
                              "windows": [[1, 1], [5, 5]]}},
            "seeds": [0, 1],
        })
        serial = run_search(specs, seeds, BASE, train, val, features,
                            {"AU": au_bank}, jobs=1)
        parallel = run_search(specs, seeds, BASE, train, val, features,
                              {"AU": au_bank}, jobs=2)
        assert report_to_csv(serial) == report_to_csv(parallel)
        assert report_to_markdown(serial) == report_to_markdown(parallel)


def tiny_report(corpus):
    _, features, train, val = corpus
    specs, seeds, _, _ = parse_grid({
        "targets": {"V": {"windows": [[1, 1], [5, 5]]}},
        "seeds": [0, 1],
    })
    return run_search(specs, seeds, BASE, train, val, features, {})


class TestReportSerialization:
    def test_csv_roundtrip(self, corpus):
        report = tiny_report(corpus)
        text = report_to_csv(report)
        back = report_from_csv(text)
        assert back.seeds == report.seeds
        assert [r.spec for r in back.rows] == [r.spec for r in report.rows]
        assert [r.scores for r in back.rows] == [r.scores for r in report.rows]
        assert [r.mean for r in back.rows] == [r.mean for r in report.rows]
        assert [r.best for r in back.rows] == [r.best for r in report.rows]

    def test_csv_roundtrip_keeps_error_strings(self, corpus):
        _, features, train, val = corpus
        spec = StrategySpec("V", ("AU",), ("V",), False, 1, 1)
        report = run_search([spec], [0], BASE, train, val, features, {})
        back = report_from_csv(report_to_csv(report))
        assert back.rows[0].scores == report.rows[0].scores
        assert back.rows[0].mean is None

    def test_csv_excludes_wall_clock(self, corpus):
        report = tiny_report(corpus)
        text = report_to_csv(report)
        assert "wall" not in text
        retimed = dataclasses.replace(report)
        retimed.rows = [dataclasses.replace(r, wall_clock_s=r.wall_clock_s + 99.0)
                        for r in report.rows]
        assert report_to_csv(retimed) == text

    def test_markdown_column_count(self, corpus):
        """4 fusion marks + 4 joint marks + 3 temporal columns + seeds + mean."""
        report = tiny_report(corpus)
        lines = report_to_markdown(report).split("\n")
        header = next(l for l in lines if l.startswith("|"))
        n_cols = len([c for c in header.split("|") if c.strip()])
        assert n_cols == 4 + 4 + 3 + len(report.seeds) + 1

    def test_markdown_bolds_exactly_the_best_row(self, corpus):
        report = tiny_report(corpus)
        lines = report_to_markdown(report).split("\n")
        bold = [l for l in lines if "**" in l]
        assert len(bold) == 1
        best = next(r for r in report.rows if r.best)
        assert f"**{best.mean:.4f}**" in bold[0]

    def test_markdown_marks_failures_and_lists_skips(self, corpus):
        _, features, train, val = corpus
        spec = StrategySpec("V", ("AU",), ("V",), False, 1, 1)
        report = run_search([spec], [0], BASE, train, val, features, {},
                            skipped=["target V cannot fuse its own bank"])
        text = report_to_markdown(report)
        assert "failed" in text
        assert "Skipped invalid grid points" in text
        assert "cannot fuse its own bank" in text
