import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from revdesign import dataset as ds, evalkit, model as mdl
from revdesign.evalkit import (
    ParsedPrediction,
    accuracy,
    param_mse,
    parse_output,
    render_compare,
    render_report,
    render_table,
)
from revdesign.imgedit import EditOp, EditSpec, OP_NAMES
from revdesign.prompting import build_vocab


def spec_of(*pairs):
    return EditSpec(tuple(EditOp(n, v) for n, v in pairs))


# ---------------------------------------------------------------- parsing ---


def test_parse_single():
    p = parse_output("The edit applied brightness with value -0.30.")
    assert p.ops == (("brightness", -0.30),)
    assert not p.malformed


def test_parse_empty():
    p = parse_output("")
    assert p.ops == ()
    assert not p.malformed


def test_parse_duplicates_keep_first():
    p = parse_output("contrast with value 0.45, contrast with value 0.10")
    assert p.ops == (("contrast", 0.45),)
    assert not p.malformed


def test_parse_malformed_value():
    p = parse_output("brightness with value abc")
    assert p.ops == ()
    assert p.malformed


def test_parse_value_without_op():
    assert parse_output("with value 0.30").malformed
    assert parse_output("a stray 0.30 number").malformed


def test_parse_overlong_value_is_malformed():
    p = parse_output("brightness with value 0.456")
    assert p.ops == ()
    assert p.malformed


def test_parse_multi():
    p = parse_output("The edits applied were: contrast with value 0.45, hue with value -0.10.")
    assert p.ops == (("contrast", 0.45), ("hue", -0.10))
    assert not p.malformed


def test_parse_totality_on_noise():
    for text in ("<eos> <eos>", "value", "-", "0.4", "hue hue hue", "....", "<img1> 9"):
        parse_output(text)  # must not raise


# ---------------------------------------------------------------- metrics ---


def test_accuracy_examples():
    gt = spec_of(("brightness", 0.5))
    assert accuracy(parse_output("brightness with value 0.10, contrast with value 0.20"), gt) == 1.0
    gt2 = spec_of(("brightness", 0.5), ("hue", 0.2))
    assert accuracy(parse_output("hue with value 0.20"), gt2) == 0.5
    assert accuracy(parse_output(""), spec_of(("gamma", 0.4))) == 0.0


def test_param_mse_examples():
    gt = spec_of(("brightness", 0.50))
    assert param_mse(parse_output("brightness with value 0.50"), gt) == 0.0
    assert param_mse(parse_output(""), gt) == pytest.approx(0.25)
    gt2 = spec_of(("brightness", 0.50), ("contrast", -0.20))
    pred = parse_output("brightness with value 0.30, hue with value 0.90")
    assert param_mse(pred, gt2) == pytest.approx(0.04)


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(min_value=0, max_value=2**32))
def test_round_trip_is_exact(seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    spec = ds.gen_spec(rng)
    pred = parse_output(ds.render_ground_truth(spec))
    assert accuracy(pred, spec) == 1.0
    assert param_mse(pred, spec) == 0.0


def oracle_accuracy(pred_pairs, gt_pairs):
    gt_names = [n for n, _ in gt_pairs]
    hit = sum(1 for n in set(p for p, _ in pred_pairs) if n in gt_names)
    return hit / len(gt_names)


def oracle_mse(pred_pairs, gt_pairs):
    lookup = {}
    for n, v in pred_pairs:
        lookup.setdefault(n, v)
    total = 0.0
    for n, v in gt_pairs:
        d = lookup.get(n, 0.0) - v
        total += d * d
    return total / len(gt_pairs)


def test_metric_oracle_sample():
    # random sample here; the exhaustive grid runs in the acceptance suite
    rng = np.random.Generator(np.random.PCG64(0))
    values = (-0.5, 0.5)
    for _ in range(300):
        k_gt = int(rng.integers(1, 4))
        gt_names = list(rng.choice(OP_NAMES, size=k_gt, replace=False))
        gt = [(n, float(rng.choice(values))) for n in gt_names]
        k_p = int(rng.integers(0, 6))
        pred_names = list(rng.choice(OP_NAMES, size=k_p, replace=False))
        pred = [(n, float(rng.choice(values))) for n in pred_names]
        pp = ParsedPrediction(tuple(pred), False, "")
        gs = spec_of(*gt)
        assert accuracy(pp, gs) == pytest.approx(oracle_accuracy(pred, gt))
        assert param_mse(pp, gs) == pytest.approx(oracle_mse(pred, gt))


# ----------------------------------------------------------------- reports ---


def _fake_report(acc, mse):
    rep = evalkit.MetricsReport()
    for key in ("all", "with_command", "without_command"):
        rep.partitions[key].add(acc, mse, False, 0)
    return rep.as_dict()


def test_render_table_headers_once_in_order():
    table = render_table([("exp1", _fake_report(0.7196, 0.29))])
    lines = table.splitlines()
    for col in (
        "Accuracy (Average)↑",
        "MSE (Average)↓",
        "Accuracy (With Command)↑",
        "MSE (With Command)↓",
        "Accuracy (Without Command)↑",
        "MSE (Without Command)↓",
    ):
        assert table.count(col) == 1
    head = lines[0]
    assert head.index("Accuracy (Average)") < head.index("MSE (Average)")
    assert head.index("MSE (Average)") < head.index("Accuracy (With Command)")
    assert "71.96" in table and "0.2900" in table


def test_compare_marks_exactly_one_best_per_column():
    runs = [
        ("exp1", _fake_report(0.71, 0.29)),
        ("exp2", _fake_report(0.72, 0.23)),
        ("exp3", _fake_report(0.70, 0.26)),
        ("exp4", _fake_report(0.72, 0.28)),  # accuracy tie with exp2
    ]
    table = render_compare(runs)
    assert table.count("*") == 6
    # tie on accuracy marks the first-best row
    exp2_line = [l for l in table.splitlines() if l.startswith("exp2")][0]
    exp4_line = [l for l in table.splitlines() if l.startswith("exp4")][0]
    assert exp2_line.count("*") == 6
    assert exp4_line.count("*") == 0


@pytest.fixture(scope="module")
def tiny_eval(tmp_path_factory):
    """Evaluate an untrained model on a tiny corpus: structure, not quality."""
    manifest = ds.build_manifest(5, 12)
    vocab = build_vocab()
    cfg = mdl.ModelConfig(vocab_size=len(vocab), seed=2)
    params = mdl.init_params(cfg)
    records = manifest.split("test") + manifest.split("val")
    report, rows = evalkit.evaluate(params, cfg, vocab, manifest, records,
                                    eval_seed=9, max_new=8)
    return report, rows, records


def test_evaluate_partition_counts(tiny_eval):
    report, rows, records = tiny_eval
    n = len(records)
    assert report.partitions["all"].n == 2 * n
    assert report.partitions["with_command"].n == n
    assert report.partitions["without_command"].n == n
    assert len(rows) == 2 * n
    bucket_total = sum(report.partitions[f"cmd_len_{b}"].n for b in ("0", "1_4", "5_8", "9plus"))
    assert bucket_total == 2 * n
    assert report.partitions["cmd_len_0"].n >= n  # all without-command evals land here


def test_evaluate_average_is_mean_of_partitions(tiny_eval):
    report, _, _ = tiny_eval
    a = report.partitions
    assert a["all"].accuracy == pytest.approx(
        (a["with_command"].accuracy + a["without_command"].accuracy) / 2
    )


def test_render_report_files(tiny_eval, tmp_path):
    report, rows, records = tiny_eval
    out = tmp_path / "rep"
    table = render_report(report, rows, str(out), label="smoke")
    report_json = json.loads((out / "report.json").read_text())
    assert (out / "report.txt").read_text() == table
    assert len((out / "predictions.jsonl").read_text().splitlines()) == 2 * len(records)
    acc = report_json["partitions"]["all"]["accuracy"]
    assert f"{100 * acc:.2f}" in table


def test_report_metadata_notes_paired_scheme(tiny_eval):
    report, _, _ = tiny_eval
    assert "paired" in report.metadata["scheme"]
