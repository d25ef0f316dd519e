import json
import subprocess
import sys
from importlib import resources

import jsonschema
import pytest
from referencing import Registry, Resource

from certiformer.cli import main
from certiformer.io import generate_planted_fixture, save_model
from conftest import DATA

MODEL = str(DATA / "fixture42")


def run(args, capsys):
    code = main(args)
    out = capsys.readouterr()
    return code, out.out, out.err


def validator(name):
    pkg = resources.files("certiformer") / "schemas"
    docs = {p.name: json.loads(p.read_text()) for p in pkg.iterdir() if p.name.endswith(".json")}
    reg = Registry().with_resources([(k, Resource.from_contents(v)) for k, v in docs.items()])
    return jsonschema.Draft202012Validator(docs[f"{name}.json"], registry=reg)


def test_certify_smoke(capsys):
    code, out, _ = run(["certify", "--model", MODEL, "--text", "good food", "--p", "2", "--t", "1"], capsys)
    assert code == 0
    rep = json.loads(out)
    validator("certify").validate(rep)
    sets = rep["instances"][0]["sets"]
    assert len(sets) == 2 and all(s["certified_epsilon"] > 0 for s in sets)


def test_ibp_not_above_bf(capsys):
    eps = {}
    for method in ("ibp", "bf"):
        code, out, _ = run(["certify", "--model", MODEL, "--text", "good food .", "--method", method], capsys)
        assert code == 0
        eps[method] = [s["certified_epsilon"] for s in json.loads(out)["instances"][0]["sets"]]
    assert all(a <= b for a, b in zip(eps["ibp"], eps["bf"]))


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": MODEL, "text": "good", "epsilon_maximum": 3}))
    code, _, err = run(["certify", "--config", str(cfg)], capsys)
    assert code == 2 and "epsilon_maximum" in err


def test_config_file_and_override(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": MODEL, "text": ["good food"], "p": "inf", "method": "ibp"}))
    code, out, _ = run(["certify", "--config", str(cfg), "--method", "bf"], capsys)
    rep = json.loads(out)
    assert code == 0 and rep["settings"]["p"] == "inf" and rep["settings"]["method"] == "BackwardForward"


@pytest.mark.parametrize("args", [
    ["certify", "--model", MODEL, "--text", "good", "--p", "3"],
    ["certify", "--model", MODEL],
    ["certify", "--model", MODEL, "--text", "   "],
    ["certify", "--model", MODEL, "--text", "good", "--t", "0"],
    ["certify", "--model", MODEL, "--text", "good", "--eps-max", "-1"],
])
def test_config_errors(args, capsys):
    assert run(args, capsys)[0] == 2


def test_model_errors(tmp_path, capsys):
    assert run(["certify", "--model", str(tmp_path / "missing"), "--text", "good"], capsys)[0] == 3
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "model.json").write_text("{}")
    (bad / "model.bin").write_bytes(b"")
    (bad / "vocab.tsv").write_text("<unk>\t0\n")
    assert run(["certify", "--model", str(bad), "--text", "good"], capsys)[0] == 3


def test_misclassified_field(capsys):
    code, out, _ = run(["certify", "--model", MODEL, "--text", "good food ."], capsys)
    pred = json.loads(out)["instances"][0]["prediction"]
    code, out, _ = run(["certify", "--model", MODEL, "--text", "good food .", "--label", str(1 - pred)], capsys)
    inst = json.loads(out)["instances"][0]
    assert code == 0 and inst["misclassified"] is True and "sets" not in inst


def test_input_file_with_labels(tmp_path, capsys):
    f = tmp_path / "in.txt"
    f.write_text("good food .\n\nthe service was slow\n")
    code, out, _ = run(["certify", "--model", MODEL, "--input-file", str(f), "--max-sets", "2"], capsys)
    rep = json.loads(out)
    assert code == 0 and len(rep["instances"]) == 2
    assert rep["instances"][1]["truncated"] is True


def test_importance_schema_and_single_word(capsys):
    code, out, _ = run(["importance", "--model", MODEL, "--text", "good"], capsys)
    rep = json.loads(out)
    validator("importance").validate(rep)
    inst = rep["instances"][0]
    assert inst["most_important"]["ours"] == inst["least_important"]["ours"] == "good"


def test_importance_planted(tmp_path, capsys):
    fx = generate_planted_fixture(11)
    save_model(fx.model, tmp_path, fx.vocab)
    text = " ".join(fx.vocab.tokens[i] for i in fx.token_ids)
    code, out, _ = run(["importance", "--model", str(tmp_path), "--text", text], capsys)
    inst = json.loads(out)["instances"][0]
    assert code == 0
    assert inst["rankings"]["ours"][0] == fx.dominant
    assert inst["most_important"]["ours"] == fx.vocab.tokens[fx.token_ids[fx.dominant - 1]]


def test_ablate(capsys):
    code, out, _ = run(["ablate", "--model", MODEL, "--text", "good food .", "--p", "2", "--p", "inf",
                        "--timing"], capsys)
    rep = json.loads(out)
    validator("ablate").validate(rep)
    res = rep["instances"][0]["results"]
    assert [r["p"] for r in res] == ["2", "inf"]
    for r in res:
        assert set(r["methods"]) == {"FullyForward", "FullyBackward", "BackwardForward"}
        assert r["methods"]["FullyForward"]["min"] <= r["methods"]["BackwardForward"]["min"] + 1e-12


def test_table_output(capsys):
    code, out, _ = run(["certify", "--model", MODEL, "--text", "good food", "--format", "table"], capsys)
    assert code == 0 and "certified_eps" in out and "min" in out


def test_gen_fixture(tmp_path, capsys):
    code, out, _ = run(["gen-fixture", "--seed", "42", "--out", str(tmp_path)], capsys)
    assert code == 0
    assert json.loads(out)["model_sha256"] == "af92148323daa3f227fab14d5f6c3babc5201ea806db0bf2e97e3ef324ff7eb1"
    assert run(["gen-fixture", "--seed", "1"], capsys)[0] == 2


def test_report_reproducible_across_processes(tmp_path):
    outs = []
    for k in range(2):
        dest = tmp_path / f"r{k}.json"
        subprocess.run([sys.executable, "-m", "certiformer.cli", "certify", "--model", MODEL,
                        "--text", "good food .", "--t", "2", "--threads", "1", "--seed", "7",
                        "--out", str(dest)], check=True)
        outs.append(dest.read_bytes())
    assert outs[0] == outs[1]


def test_threads_do_not_change_report(capsys):
    base = ["certify", "--model", MODEL, "--text", "good food . nice", "--t", "2"]
    _, one, _ = run(base + ["--threads", "1"], capsys)
    _, four, _ = run(base + ["--threads", "4"], capsys)
    assert one == four
