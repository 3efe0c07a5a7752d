"""Acceptance criteria, one printed PASS/FAIL line each.

Tolerances and thresholds are fixed by the criteria and must not be relaxed.
"""

import time

import numpy as np
import pytest

from ddp_workbench.alignment import read_report_csv
from ddp_workbench.cli import main
from ddp_workbench.harness import write_rationale
from ddp_workbench.interpreters import (
    METHODS, InterpreterConfig, default_sigma, inpgrad, integrad, interpret, itergrad, rankmask,
    smoothgrad, vagrad,
)
from ddp_workbench.metrics import (
    MetricBudget, cross_evaluate, era_metric, era_oracle, mma_metric, random_mask_drop,
)
from ddp_workbench.models import EmbeddedText, build_model, erase

from helpers import LinearStub, text

N_EVAL = 100
CSA_NATIVE = ("vagrad", "smoothgrad", "itergrad")
ERA_NATIVE = ("inpgrad", "integrad")


@pytest.fixture
def report(capsys):
    def emit(k, name, passed, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if passed else 'FAIL'}] criterion {k} ({name}): {detail}")
        assert passed, detail
    return emit


def predicted(model, x):
    return int(np.argmax(model.predict(x)))


@pytest.fixture(scope="module")
def eval_texts(test_texts):
    return test_texts[0][:N_EVAL]


@pytest.fixture(scope="module")
def cross(bag_model, attention_model, eval_texts, train_texts):
    cfg = InterpreterConfig(smoothgrad_sigma=default_sigma(train_texts[0]))
    out = {}
    for arch, model in (("bag", bag_model), ("attention", attention_model)):
        methods = [m for m in METHODS if arch == "attention" or m != "rankmask"]
        budgets = [MetricBudget.default("CSA"), MetricBudget.default("ERA")]
        if arch == "attention":
            budgets.append(MetricBudget.default("MMA"))
        curves = cross_evaluate(model, eval_texts, methods, budgets, cfg)
        out[arch] = {(c.method, c.metric): c for c in curves}
    return out


def test_criterion_1_gradient_fidelity(report):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    h, worst, checked = 1e-5, 0.0, 0
    for arch in ("bag", "attention"):
        model = build_model(arch, 8, 2, seed=1)
        for _ in range(50):
            n = int(rng.integers(1, 11))
            x = EmbeddedText(np.arange(n) + 2, rng.normal(size=(n, 8)))
            c = int(rng.integers(0, 2))
            g = model.input_gradient(x, c)
            for i in np.ndindex(g.shape):
                if abs(g[i]) <= 1e-6:
                    continue
                xp, xm = x.embeddings.copy(), x.embeddings.copy()
                xp[i] += h
                xm[i] -= h
                fd = (model.predict(x.with_embeddings(xp))[c] - model.predict(x.with_embeddings(xm))[c]) / (2 * h)
                worst = max(worst, abs(g[i] - fd) / abs(g[i]))
                checked += 1
    elapsed = time.perf_counter() - start
    report(1, "gradient fidelity", worst < 1e-4 and elapsed < 10,
           f"max relative error {worst:.2e} (< 1e-4) over {checked} components, {elapsed:.1f}s (< 10s)")


def test_criterion_2_closed_form_equivalences(report, bag_model, attention_model, eval_texts):
    W = np.array([[1.0, 0.0], [0.0, 2.0]])
    lin_x = text([[1.0, 1.0], [1.0, 1.0]])
    va = vagrad(LinearStub(W), lin_x, 0, 1.0).scores
    ok_a = np.max(np.abs(va - [1 / np.sqrt(5), 2 / np.sqrt(5)])) <= 1e-9

    ok_b = True
    for model in (bag_model, attention_model):
        for x in eval_texts[:20]:
            c = predicted(model, x)
            s, v = smoothgrad(model, x, c, 0.5, 0.0, 20, seed=0), vagrad(model, x, c, 0.5)
            ok_b &= np.array_equal(s.scores, v.scores) and np.array_equal(s.h, v.h)

    rng = np.random.default_rng(0)
    dev_c = 0.0
    for _ in range(20):
        stub, x = LinearStub(rng.normal(size=(5, 3))), text(rng.normal(size=(5, 3)))
        a, b = itergrad(stub, x, 0, 0.7, t_max=1, alpha=0.7), vagrad(stub, x, 0, 0.7)
        dev_c = max(dev_c, np.max(np.abs(a.h - b.h)), np.max(np.abs(a.scores - b.scores)))

    dev_d = 0.0
    for model in (bag_model, attention_model, LinearStub(rng.normal(size=(12, 8)))):
        for x in eval_texts[:20]:
            c = 0 if isinstance(model, LinearStub) else predicted(model, x)
            dev_d = max(dev_d, np.max(np.abs(integrad(model, x, c, 1).scores - inpgrad(model, x, c).scores)))
    passed = ok_a and ok_b and dev_c <= 1e-9 and dev_d <= 1e-9
    report(2, "closed-form equivalences", passed,
           f"vagrad linear scores {np.round(va, 6).tolist()} ok={ok_a}; smoothgrad sigma=0 bitwise={ok_b}; "
           f"itergrad(t=1, alpha=eps) vs vagrad {dev_c:.1e}; integrad(T=1) vs inpgrad {dev_d:.1e} (<= 1e-9)")


def test_criterion_3_integrad_convergence(report, bag_model, eval_texts):
    start = time.perf_counter()
    res = {2: [], 20: []}
    for x in eval_texts:
        c = predicted(bag_model, x)
        exact = bag_model.predict(x)[c] - bag_model.predict(erase(x, range(len(x))))[c]
        for T in res:
            res[T].append(abs(integrad(bag_model, x, c, T).scores.sum() - exact))
    budget = MetricBudget.default("ERA")
    curves = {T: cross_evaluate(bag_model, eval_texts, ["integrad"], [budget],
                                InterpreterConfig(integrad_points=T))[0].means for T in (2, 20)}
    dominated = sum(a >= b for a, b in zip(curves[20], curves[2]))
    frac = dominated / len(budget.grid)
    elapsed = time.perf_counter() - start
    r2, r20 = float(np.mean(res[2])), float(np.mean(res[20]))
    report(3, "integrad convergence", r20 < r2 and frac >= 0.8 and elapsed < 120,
           f"mean |residual| T=20 {r20:.4g} < T=2 {r2:.4g}; ERA dominance {dominated}/{len(budget.grid)} "
           f"(>= 80%); {elapsed:.1f}s (< 120s)")


def _win_fraction(curves, metric, natives):
    group = [c for (m, met), c in curves.items() if met == metric]
    n = len(group[0].means)
    wins = sum(max(curves[m, metric].means[i] for m in natives) >= max(c.means[i] for c in group)
               for i in range(n))
    return wins, n


def test_criterion_4_matched_definition_advantage(report, cross):
    parts, passed = [], True
    for arch, curves in cross.items():
        checks = [("CSA", CSA_NATIVE), ("ERA", ERA_NATIVE)]
        if arch == "attention":
            checks.append(("MMA", ("rankmask",)))
        for metric, natives in checks:
            wins, n = _win_fraction(curves, metric, natives)
            passed &= wins / n >= 0.7
            parts.append(f"{arch}/{metric} {wins}/{n}")
    report(4, "matched-definition advantage", passed, "native wins " + ", ".join(parts) + " (each >= 70%)")


def test_criterion_5_within_definition_ordering(report, cross, bag_model, attention_model, eval_texts, train_texts):
    parts, passed = [], True
    for arch, curves in cross.items():
        it, va = curves["itergrad", "CSA"].means, curves["vagrad", "CSA"].means
        ok = all(a >= b for a, b in zip(it, va))
        passed &= ok
        parts.append(f"{arch} itergrad>=vagrad at {sum(a >= b for a, b in zip(it, va))}/{len(it)} radii")
    cfg = InterpreterConfig(smoothgrad_sigma=default_sigma(train_texts[0]))
    violations, checked = 0, 0
    for model in (bag_model, attention_model):
        methods = [m for m in METHODS if model.arch == "attention" or m != "rankmask"]
        for i, x in enumerate(eval_texts):
            assert len(x) <= 20
            c = predicted(model, x)
            best = era_oracle(model, x, c, 1)
            for m in methods:
                drop = era_metric(model, x, c, interpret(m, model, x, c, 0.5, cfg, seed=i), 1)
                violations += drop > best
                checked += 1
    passed &= violations == 0
    parts.append(f"oracle bound violations {violations}/{checked}")
    report(5, "within-definition ordering", passed, "; ".join(parts))


def test_criterion_6_mma_sanity(report, attention_model, eval_texts):
    rng = np.random.default_rng(0)
    parts, passed = [], True
    for s in range(1, 6):
        rm, rnd = [], []
        for x in eval_texts:
            c = predicted(attention_model, x)
            rm.append(mma_metric(attention_model, x, c, rankmask(attention_model, x), s))
            rnd.append(random_mask_drop(attention_model, x, c, s, 20, rng))
        ok = np.mean(rm) > np.mean(rnd)
        passed &= ok
        parts.append(f"s={s} {np.mean(rm):.4f} vs {np.mean(rnd):.4f}")
    report(6, "MMA sanity", passed, "rankmask vs random mask: " + ", ".join(parts))


def _align(tmp_path, name):
    rationale = tmp_path / "rationale.json"
    write_rationale(rationale, ["pos0", "pos1", "pos2", "neg0", "neg1", "neg2"])
    out = tmp_path / name
    assert main(["align", "--arch", "attention", "--rationale", str(rationale), "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def align_dirs(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("align")
    return _align(tmp, "first"), _align(tmp, "second")


def test_criterion_7_alignment_trend(report, align_dirs):
    rep = read_report_csv(align_dirs[0] / "alignment.csv")
    gain = rep.similarity_mean[-1] - rep.similarity_mean[0]
    acc_drop = rep.heldout_accuracy[0] - rep.heldout_accuracy[-1]
    passed = rep.rounds[-1] == 5 and gain >= 0.10 and acc_drop <= 0.05
    report(7, "alignment trend", passed,
           f"similarity {rep.similarity_mean[0]:.4f} -> {rep.similarity_mean[-1]:.4f} (gain {gain:+.4f}, >= 0.10); "
           f"held-out accuracy {rep.heldout_accuracy[0]:.4f} -> {rep.heldout_accuracy[-1]:.4f} "
           f"(drop {acc_drop:+.4f}, <= 0.05)")


def test_alignment_similarity_is_nearly_monotone(align_dirs):
    sim = read_report_csv(align_dirs[0] / "alignment.csv").similarity_mean
    assert sum(b < a for a, b in zip(sim, sim[1:])) <= 1


def test_criterion_8_determinism(report, align_dirs, tmp_path):
    runs = []
    for name in ("first", "second"):
        out = tmp_path / name
        assert main(["cross-eval", "--arch", "attention", "--sample-size", "40", "--out", str(out)]) == 0
        runs.append(out)
    same_cross = (runs[0] / "curves.csv").read_bytes() == (runs[1] / "curves.csv").read_bytes()
    same_summary = (runs[0] / "summary.csv").read_bytes() == (runs[1] / "summary.csv").read_bytes()
    same_align = (align_dirs[0] / "alignment.csv").read_bytes() == (align_dirs[1] / "alignment.csv").read_bytes()
    report(8, "determinism", same_cross and same_summary and same_align,
           f"cross-eval curves identical={same_cross}, summary identical={same_summary}, "
           f"align report identical={same_align}")
