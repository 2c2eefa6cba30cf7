import subprocess
import sys

import pytest

from mtlab import kvfile
from mtlab.corpus import ManifestEntry, make_pretraining_suite, make_shared_task_replica, \
    save_corpus, write_manifest
from mtlab.harness import (ExperimentPlan, ExperimentResult, PlanError, cli_main, load_result,
                           parse_report_csv, render_report, replica_plan, run_experiment)

TINY_PLAN = """\
kind = experiment
corpora = replica
scale = 0.03
vocab_size = 300
model.num_layers = 1
model.num_heads = 2
model.d_model = 8
model.d_ff = 16
model.max_seq_len = 48
{extra}

kind = base
name = multi
type = multilingual
pairs = en,pt
epochs = 1
learning_rate = 1e-3

kind = strategy
name = direct
type = direct
base = multi
epochs = 1

kind = strategy
name = scratch
type = scratch
epochs = 1
"""

PAIRS = ("quy", "aym", "bzd", "cni", "shp", "czn")

# published test rows (eleven pairs) and the shared-task baseline
PUBLISHED_PAIRS = ("aym", "bzd", "cni", "czn", "gn", "hch", "nah", "oto", "quy", "shp", "tar")
PUBLISHED_TEST = {
    "M2": (19.05, 19.90, 23.50, 14.41, 19.35, 12.05, 21.88, 9.22, 34.15, 20.43, 13.86),
    "M3": (18.52, 21.17, 25.85, 15.61, 21.75, 13.88, 26.57, 7.40, 35.62, 21.26, 14.87),
    "M4": (18.59, 13.24, 23.79, 13.64, 20.94, 14.67, 22.60, 7.28, 32.75, 18.13, 12.07),
}
PUBLISHED_DEV = {  # czn has no dev score
    "M1": (12.25, 20.3, 26.65, None, 23.83, 11.09, 29.55, 6.57, 35.04, 20.99, 14.12),
    "M2": (20.65, 18.59, 20.63, None, 20.40, 12.7, 18.66, 10.17, 33.53, 21.03, 13.54),
    "M3": (14.70, 19.9, 25.62, None, 23.62, 11.82, 29.94, 7.94, 35.3, 21.32, 14.19),
    "M4": (20.89, 12.17, 23.59, None, 20.84, 13.51, 22.63, 7.16, 30.86, 18.02, 12.60),
}
PUBLISHED_BASELINE = dict(zip(PUBLISHED_PAIRS, (28.3, 16.5, 25.8, None, 33.6, 30.4, 26.6, 14.7, 34.3,
                                        32.9, 18.4)))


def tiny_plan(extra=""):
    return ExperimentPlan.from_text(TINY_PLAN.format(extra=extra))


def published_result(sections=("dev", "test")):
    scores = {}
    for split, rows in (("dev", PUBLISHED_DEV), ("test", PUBLISHED_TEST)):
        if split not in sections:
            continue
        for model, values in rows.items():
            for p, v in zip(PUBLISHED_PAIRS, values):
                if v is not None:
                    scores[(model, p, split)] = v
    return ExperimentResult(("M1", "M2", "M3", "M4"), PUBLISHED_PAIRS, scores,
                            baseline={p: v for p, v in PUBLISHED_BASELINE.items() if v is not None})


def row(report, split_label, model):
    """Cells of one rendered row, located within its split section."""
    lines = report.splitlines()
    start = next(i for i, ln in enumerate(lines) if ln.startswith(split_label))
    for ln in lines[start:]:
        parts = ln.split()
        if ln.startswith(split_label):
            parts = parts[1:]
        if parts and parts[0] == model:
            return parts[1:]
    raise AssertionError(f"no {model} row in {split_label}")


@pytest.fixture(scope="module")
def full_grid(tmp_path_factory):
    out = tmp_path_factory.mktemp("grid")
    plan = tiny_plan()
    return plan, out, run_experiment(plan, out)


@pytest.fixture(scope="module")
def per_pair(tmp_path_factory):
    out = tmp_path_factory.mktemp("perpair")
    plan = tiny_plan("mode = per-pair")
    return plan, out, run_experiment(plan, out)


# --- plans ------------------------------------------------------------------------------


def test_packaged_plans_parse():
    full = replica_plan("replica")
    assert [s.name for s in full.strategies] == ["M1", "M2", "M3", "M4", "scratch"]
    assert full.submitted == ("M2", "M3", "M4", "scratch")
    assert {s.kind for s in full.strategies} == {"direct", "intermediate", "bilingual", "scratch"}
    assert replica_plan("replica-smoke").scale < 1


@pytest.mark.parametrize("edit, message", [
    (("base = multi\nepochs = 1\n\nkind = strategy\nname = scratch", "base = nope\nepochs = 1\n\n"
      "kind = strategy\nname = scratch"), "unknown base"),
    (("mode", "mode"), None),
    (("epochs = 1\nlearning_rate", "epoch = 1\nlearning_rate"), "unknown training keys"),
    (("type = multilingual", "type = bilingual"), "bilingual base cannot use 2"),
])
def test_plan_errors(edit, message):
    text = TINY_PLAN.format(extra="mode = sideways" if message is None else "")
    text = text.replace(*edit, 1)
    with pytest.raises(PlanError, match=message or "mode must be"):
        ExperimentPlan.from_text(text)


def test_plan_overrides_and_stage_keys():
    plan = ExperimentPlan.from_text(TINY_PLAN.format(extra=""), overrides={"seeds": "3,4"})
    assert plan.seeds == (3, 4)
    text = TINY_PLAN.format(extra="") + "\nkind = strategy\nname = two\ntype = intermediate\n" \
        "base = multi\nepochs = 2\nstage2.epochs = 7\nstage1.learning_rate = 0.01\n"
    two = ExperimentPlan.from_text(text).strategies[-1]
    assert [c.epochs for c in two.stages] == [2, 7]
    assert [c.learning_rate for c in two.stages] == [0.01, 3e-4]


# --- running ----------------------------------------------------------------------------


def test_full_grid_arithmetic(full_grid):
    _, _, result = full_grid
    assert result.pairs == PAIRS
    dev = [k for k in result.scores if k[2] == "dev"]
    test = [k for k in result.scores if k[2] == "test"]
    assert len(dev) == 12 and len(test) == 12 and not result.failed


def test_per_pair_selects_dev_argmax(per_pair):
    _, _, result = per_pair
    assert len([k for k in result.scores if k[2] == "dev"]) == 12
    test = [k for k in result.scores if k[2] == "test"]
    assert len(test) == 6
    for pair in PAIRS:
        dev = {s: result.scores[(s, pair, "dev")] for s in result.strategies}
        chosen = result.metadata[f"selected.{pair}"]
        assert dev[chosen] == max(dev.values())
        first_best = next(s for s in result.strategies if dev[s] == max(dev.values()))
        assert chosen == first_best
        assert (chosen, pair, "test") in result.scores


def test_phase_b_trains_on_train_plus_dev(full_grid):
    _, out, result = full_grid
    pool = {c.target_code: c for c in make_shared_task_replica(0, 0.03)}
    for (s, p, split, _), node in result.checkpoints.items():
        meta = kvfile.read(out / node / "node.txt")
        want = len(pool[p].train) + (len(pool[p].dev) if split == "test" else 0)
        assert int(meta["examples"]) + int(meta["dropped"]) == want


def test_rerun_trains_nothing(full_grid):
    plan, out, first = full_grid
    again = run_experiment(plan, out)
    assert again.steps_run == 0 and first.steps_run > 0
    assert again.scores == first.scores
    assert render_report(again) == render_report(first)


def test_shared_stages_trained_once(full_grid):
    _, out, _ = full_grid
    nodes = sorted(p.name.split("-")[0] for p in (out / "nodes").iterdir())
    # one vocab, one base, 6 pairs x 2 strategies x 2 phases
    assert nodes.count("vocab") == 1 and nodes.count("base") == 1
    assert len(nodes) == 2 + 24


def test_conservation(full_grid):
    _, out, result = full_grid
    assert set(result.checkpoints) == set(result.seed_scores)
    for (s, p, split, seed), node in result.checkpoints.items():
        d = out / node
        assert (d / "complete").exists() and (d / "model.ckpt").exists()
        saved = kvfile.read(d / f"score.{split}")
        assert float(saved["score"]) == result.seed_scores[(s, p, split, seed)]
        assert (d / f"hyp.{split}.txt").read_text().count("\n") == 3


def test_results_file_round_trip(full_grid):
    _, out, result = full_grid
    back = load_result(out)
    assert back.scores == result.scores and back.metadata == result.metadata
    assert (out / "report.txt").read_text() == render_report(back)
    assert (out / "stats.txt").read_text().startswith("Language")


def test_metadata_lists_configs(full_grid):
    meta = full_grid[2].metadata
    assert meta["plan.seeds"] == "0" and meta["model.d_model"] == "8"
    assert meta["base.multi.epochs"] == "1" and meta["strategy.direct.stage1.learning_rate"]
    assert "dropped.total" in meta


def test_failed_cell_is_recorded_and_run_continues(tmp_path):
    corpora = make_shared_task_replica(0, 0.03)[:3] + make_pretraining_suite(0, 0.03)[1:]
    entries = [save_corpus(c, tmp_path / c.target_code) for c in corpora]
    broken = make_shared_task_replica(0, 0.03)[3]
    dev_only = save_corpus(type(broken)("es", "cni", dev=broken.dev, test=broken.test),
                           tmp_path / "cni")
    entries.append(ManifestEntry("cni", paths=dev_only.paths))
    write_manifest(entries, tmp_path / "corpora.manifest")
    text = TINY_PLAN.format(extra="").replace("corpora = replica", "corpora = corpora.manifest")
    (tmp_path / "p.plan").write_text(text)
    result = run_experiment(ExperimentPlan.from_file(tmp_path / "p.plan"), tmp_path / "out")
    assert result.pairs == ("quy", "aym", "cni")
    assert ("scratch", "cni", "dev") in result.failed
    assert "TrainingError" in result.failed[("direct", "cni", "dev")]
    # with dev folded in, cni has training rows for the test phase
    assert set(result.failed) == {("direct", "cni", "dev"), ("scratch", "cni", "dev")}
    assert len(result.scores) == 10
    report = render_report(result)
    assert row(report, "Dev", "direct")[2] == "-"
    assert row(report, "Dev", "direct")[3].endswith("*")


def test_corpus_errors_carry_pair_context(tmp_path):
    (tmp_path / "a.es").write_text("x\ny\n")
    (tmp_path / "a.zz").write_text("x\n")
    (tmp_path / "m.manifest").write_text("code = zz\ntrain.src = a.es\ntrain.tgt = a.zz\n")
    text = TINY_PLAN.format(extra="").replace("corpora = replica", "corpora = m.manifest")
    (tmp_path / "p.plan").write_text(text)
    with pytest.raises(ValueError, match="es-zz"):
        run_experiment(ExperimentPlan.from_file(tmp_path / "p.plan"), tmp_path / "out")


# --- reports ----------------------------------------------------------------------------


def test_single_cell_report():
    result = ExperimentResult(("M1",), ("quy",), {("M1", "quy", "dev"): 31.415})
    text = render_report(result)
    assert row(text, "Dev", "M1") == ["**31.42**", "**31.42**"]
    assert render_report(result, "csv") == "split,model,quy,average\ndev,M1,31.415,31.415\n"


def test_csv_round_trip(full_grid):
    result = full_grid[2]
    scores, baseline = parse_report_csv(render_report(result, "csv"))
    assert scores == result.scores and baseline == {}
    table = published_result()
    scores, baseline = parse_report_csv(render_report(table, "csv"))
    assert scores == table.scores and baseline == table.baseline


def test_published_m3_test_row():
    text = render_report(published_result(("test",)), rounding="truncate")
    cells = dict(zip(PUBLISHED_PAIRS + ("Average",), row(text, "Test", "M3")))
    assert cells["bzd"] == "__**21.17**__"
    assert cells["cni"] == "__**25.85**__"
    assert cells["quy"] == "__**35.62**__"
    assert cells["aym"] == "18.52" and cells["oto"] == "7.40"
    assert cells["Average"] == "**20.22**"


def test_published_test_section_marks_and_averages():
    text = render_report(published_result(), rounding="truncate")
    marked = {}
    for model in ("M2", "M3", "M4"):
        cells = row(text, "Test", model)
        marked[model] = {p for p, c in zip(PUBLISHED_PAIRS, cells) if "**" in c}
        assert row(text, "Test", model)[-1].strip("*") == {"M2": "18.89", "M3": "20.22",
                                                            "M4": "17.97"}[model]
    # the published bold cells
    assert marked == {"M2": {"aym", "oto"}, "M3": {"bzd", "cni", "czn", "gn", "nah", "quy",
                                                   "shp", "tar"}, "M4": {"hch"}}
    assert "__" not in " ".join(row(text, "Test", "M2") + row(text, "Test", "M4"))
    assert row(text, "Test", "Baseline")[3] == "-"


def test_published_dev_section():
    text = render_report(published_result(), rounding="truncate")
    averages = {m: row(text, "Dev", m)[-1] for m in ("M1", "M2", "M3", "M4")}
    assert averages == {"M1": "20.03*", "M2": "18.99*", "M3": "**20.43***", "M4": "18.22*"}
    assert all(row(text, "Dev", m)[3] == "-" for m in ("M1", "M2", "M3", "M4"))


def test_rounding_modes():
    result = ExperimentResult(("a",), ("x",), {("a", "x", "dev"): 18.899999})
    assert row(render_report(result), "Dev", "a")[0] == "**18.90**"
    assert row(render_report(result, rounding="truncate"), "Dev", "a")[0] == "**18.89**"


def test_render_errors():
    with pytest.raises(ValueError):
        render_report(ExperimentResult(("a",), ("x",), {}))
    with pytest.raises(ValueError):
        render_report(published_result(), "html")


# --- command line -------------------------------------------------------------------------


def run_cli(capsys, *argv):
    code = cli_main(list(map(str, argv)))
    out, err = capsys.readouterr()
    return code, out, err


def test_cli_evaluate_prints_one_number(tmp_path, capsys):
    (tmp_path / "h.txt").write_text("ab\n")
    (tmp_path / "r.txt").write_text("abc\n")
    code, out, _ = run_cli(capsys, "evaluate", "--hyp", tmp_path / "h.txt", "--ref",
                           tmp_path / "r.txt", "--order", 2)
    assert code == 0 and out == "63.64\n"


def test_cli_stats(tmp_path, capsys):
    code, out, _ = run_cli(capsys, "stats")
    assert code == 0 and "6,531" in out and out.splitlines()[0].startswith("Language")
    entry = save_corpus(make_shared_task_replica(0, 0.03)[6], tmp_path / "czn")
    write_manifest([entry], tmp_path / "m.txt")
    code, out, _ = run_cli(capsys, "stats", "--manifest", tmp_path / "m.txt", "--format", "csv")
    assert code == 0 and out.splitlines()[1].split(",")[-3:] == ["2", "3", "3"]


def test_cli_experiment_then_report(tmp_path, capsys):
    plan = tmp_path / "p.plan"
    plan.write_text(TINY_PLAN.format(extra="pairs = czn"))
    code, out, _ = run_cli(capsys, "experiment", "--plan", plan, "--out", tmp_path / "x")
    assert code == 0 and "Dev" in out
    code, report, _ = run_cli(capsys, "report", "--experiment", tmp_path / "x")
    assert code == 0 and report == (tmp_path / "x" / "report.txt").read_text()
    assert row(report, "Test", "scratch")
    code, csv_text, _ = run_cli(capsys, "report", "--experiment", tmp_path / "x", "--format", "csv")
    assert csv_text.splitlines()[0] == "split,model,czn,average"


def test_cli_train_pipeline(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("epochs = 1\nmodel.d_model = 8\nmodel.num_heads = 2\nmodel.d_ff = 16\n"
                   "model.num_layers = 1\n")
    assert run_cli(capsys, "gen-data", "--scale", 0.03, "--out", tmp_path / "d")[0] == 0
    manifest = tmp_path / "d" / "manifest.txt"
    code, out, _ = run_cli(capsys, "pretrain", "--manifest", manifest, "--pairs", "en,pt",
                           "--vocab-size", 300, "--config", cfg, "--out", tmp_path / "base")
    assert code == 0 and out.count("epoch=") == 1
    code, _, _ = run_cli(capsys, "finetune", "--model", tmp_path / "base", "--manifest", manifest,
                         "--pair", "czn", "--config", cfg, "--seed", 3, "--out", tmp_path / "ft")
    assert code == 0 and (tmp_path / "ft" / "model.ckpt").exists()
    code, out, _ = run_cli(capsys, "evaluate", "--model", tmp_path / "ft", "--manifest", manifest,
                           "--pair", "czn", "--split", "test")
    assert code == 0 and 0 <= float(out) <= 100


def test_cli_usage_errors(capsys):
    code, _, err = run_cli(capsys, "translate")
    assert code == 2 and "usage:" in err
    code, _, err = run_cli(capsys, "stats", "--bogus")
    assert code == 2 and "usage:" in err


def test_cli_runtime_error_is_one_line(tmp_path, capsys):
    code, out, err = run_cli(capsys, "evaluate", "--hyp", tmp_path / "missing", "--ref",
                             tmp_path / "missing")
    assert code == 1 and out == ""
    assert len(err.splitlines()) == 1 and err.startswith("error: FileNotFoundError: ")
    (tmp_path / "h").write_text("a\nb\n")
    (tmp_path / "r").write_text("a\n")
    code, _, err = run_cli(capsys, "evaluate", "--hyp", tmp_path / "h", "--ref", tmp_path / "r")
    assert code == 1 and err == "error: AlignmentError: 2 hypotheses vs 1 references\n"


def test_cli_config_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("nonsense = 1\n")
    code, _, err = run_cli(capsys, "stats", "--config", cfg)
    assert code == 1 and "nonsense" in err


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "mtlab", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("gen-data", "pretrain", "finetune", "evaluate", "experiment", "report", "stats"):
        assert cmd in proc.stdout
