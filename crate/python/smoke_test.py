"""Smoke test for the Python extension module.

    pip install --no-build-isolation -e crates/python
    python python/smoke_test.py
"""

import math
import tempfile
from pathlib import Path

import claimcheck as cc

FIXTURE = Path(__file__).resolve().parent.parent / "crates/cli/tests/fixtures/e2e"


def main():
    # metrics
    f, h = "factual", "hallucinated"
    assert cc.bacc([True, True, False, False], [f, h, h, f]) == 0.5
    preds = [True] * 7 + [None] * 2 + [False] + [False] * 6 + [None] + [True] * 3
    labels = [f] * 10 + [h] * 10
    assert abs(cc.bacc_unknown(preds, labels) - 0.8) < 1e-12

    # threshold search
    scores = [0.1, 0.4, 0.35, 0.8, 0.9, 0.7]
    labs = [h, h, h, f, f, f]
    tau, b = cc.search_threshold(scores, labs)
    assert 0.4 < tau < 0.7 and b == 1.0
    dual = cc.search_dual_thresholds(scores, labs, 0.7)
    assert dual["n_unknown"] == 0
    try:
        cc.search_dual_thresholds([0.5, 0.5], [f, h], 0.9)
        raise AssertionError("expected InfeasibleError")
    except cc.InfeasibleError:
        pass
    report = cc.evaluate(scores, labs, alpha_low=0.3, alpha_high=0.75)
    assert report["n_unknown"] == 3 and report["bacc_unknown"] == 1.0

    # estimators
    specs = cc.panel_specs()
    assert len(specs) == 32 and "entropy/entity/top_percent_15" in specs
    assert cc.estimate("probability/all/geometric", [0.25, 1.0], [0.1, 0.2]) == 0.5
    panel = cc.estimator_panel([0.6], [0.4])
    assert panel["probability/all/top_k_3"] == 0.6
    assert panel["entropy/all/arithmetic"] == -0.4
    assert panel["probability/entity/arithmetic"] is None

    # split
    claims = [{"id": f"c{i}", "prompt_id": "p", "text": f"claim {i}"} for i in range(10)]
    split = cc.split_dataset(claims, seed=7)
    assert [len(split[k]) for k in ("train", "validation", "test")] == [7, 2, 1]

    # gateway, pipeline, detectors on the scripted mock
    gw = cc.Gateway.mock(str(FIXTURE / "mock.jsonl"))
    assert gw.backend_name == "mock-e2e"
    first = (FIXTURE / "prompts.jsonl").read_text().splitlines()[0]
    import json
    rec = json.loads(first)
    found = cc.decompose(gw, rec["prompt_id"], rec["prompt"], rec["response"])
    assert len(found) == 3 and all(c["original_span"] == c["text"] for c in found)
    p = cc.score_claim(gw, "prompt_tf", found[0]["text"])
    assert 0.0 <= p <= 1.0
    try:
        cc.score_claim(gw, "nonsense", "x")
        raise AssertionError("expected ClaimcheckError")
    except cc.ClaimcheckError as e:
        assert "prompt_tf" in str(e)
    toks = gw.score_tokens("Context.", "Paris is in France.")
    assert len(toks["tokens"]) == gw.count_tokens("Paris is in France.")

    # dataset builder
    labeled = [dict(c, label=lab) for c, lab in zip(found, [f, h, f])]
    ds = cc.build_dataset(gw, labeled)
    assert len(ds) == 6 and all(e["output"].split(".")[0] in ("True", "False") for e in ds if e["task"] == "detect")

    # probe
    m = cc.ProbeModel(3, 8, seed=1)
    assert m.n_params == 3 * 8 + 8 + 8 + 1
    assert m.gradient_check([0.1, -0.4, 0.9], True) < 1e-4
    xs = [[i / 10, (i % 3) / 3, 1.0] for i in range(-10, 10)]
    ys = [f if x[0] > 0 else h for x in xs]
    model, info = cc.train_probe(xs, ys, config={"epochs": 300, "patience": None, "learning_rate": 0.01})
    assert info["best_bacc"] == 1.0, info["best_bacc"]
    with tempfile.TemporaryDirectory() as d:
        path = str(Path(d) / "probe.json")
        model.save(path)
        again = cc.ProbeModel.load(path)
        assert again.params() == model.params()
        assert math.isclose(again.score(xs[0]), model.score(xs[0]))

    print("python smoke test: ok")


if __name__ == "__main__":
    main()
