import csv
import io
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from latentcert import cli, pac
from latentcert.checker import import_prism
from latentcert.core import read_trace
from latentcert.latent import LatentMdp

from prism_grammar import parse_explicit


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_version(capsys):
    with pytest.raises(SystemExit) as e:
        run("--version")
    assert e.value.code == 0
    assert "latentcert" in capsys.readouterr().out


def test_console_script_version():
    out = subprocess.run([sys.executable, "-m", "latentcert.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("latentcert ")


def test_simulate_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert run("simulate", "--env", "cartpole", "--steps", 300, "--seed", 4, "--out", tmp_path / f"{name}.jsonl") == 0
    a, b = (tmp_path / "a.jsonl").read_bytes(), (tmp_path / "b.jsonl").read_bytes()
    assert a == b
    header = json.loads(a.splitlines()[0])
    assert header["env"] == "cartpole" and header["seed"] == 4 and "config_hash" in header
    tr = read_trace(tmp_path / "a.jsonl")
    assert len(tr) == 300


def test_simulate_rejects_bad_input(tmp_path):
    with pytest.raises(SystemExit) as e:
        run("simulate", "--env", "acrobot", "--out", tmp_path / "x")
    assert e.value.code == 2
    assert run("simulate", "--env", "cartpole", "--steps", 0, "--out", tmp_path / "x") == 2
    assert run("simulate", "--env", "cartpole", "--env-config", '{"nope": 1}', "--out", tmp_path / "x") == 2


def _write(tmp_path, obj, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(obj))
    return p


@pytest.mark.parametrize(
    "obj",
    [
        {"vae": {"lam_enc": 0.0}},
        {"vae": {"n_latent_actions": 5, "lam_act_enc": 0.3}},
        {"vae": {"not_a_field": 1}},
        {"extra": 1},
        {"env": {"id": "cartpole", "bogus": 1}},
        {"pac": {"epsilon": 2.0, "delta": 0.1, "gamma": 0.5}},
        {"seed": 1, "vae": {"seed": 2}},
    ],
)
def test_train_config_errors_exit_2(tmp_path, obj):
    assert run("train", "--config", _write(tmp_path, obj), "--out", tmp_path / "run") == 2


def test_train_missing_config_file(tmp_path):
    assert run("train", "--config", tmp_path / "missing.json") == 2


def test_certify_oracle_chain(tmp_path, capsys):
    out = tmp_path / "cert.json"
    code = run("certify", "--oracle-chain", "--epsilon", 0.05, "--delta", 0.05, "--gamma", 0.5, "--out", out)
    assert code == 0
    rep = json.loads(out.read_text())
    p = pac.PacParams(0.05, 0.05, 0.5)
    assert rep["T"] == pac.required_samples_value(p, rep["constants"]["KV"])
    assert rep["T_required"]["loss"] == pac.required_samples_loss(p)
    assert rep["losses"]["LR"] == pytest.approx(0.0, abs=1e-12)
    b = rep["bounds"]
    expect = pac.bound_values(rep["losses"]["LR"], rep["losses"]["LP"], rep["constants"]["KR"], rep["constants"]["KP"],
                              rep["constants"]["KV"], 0.05, 0.5)
    for k, v in expect.items():
        assert b[k] == pytest.approx(v, abs=1e-12)
    assert "LP=" in capsys.readouterr().out


def test_certify_reach_reports_latent_values(tmp_path):
    out = tmp_path / "cert.json"
    assert run("certify", "--oracle-chain", "--epsilon", 0.05, "--delta", 0.05, "--gamma", 0.5,
               "--objective", "reach", "--T", "0", "--loss-only", "--out", out) == 0
    rep = json.loads(out.read_text())
    assert rep["objectives"] == ["reach"] and rep["latent_values"]
    assert all(0 <= v <= 1 for v in rep["latent_values"].values())


def test_certify_short_trace_exits_1(tmp_path, capsys):
    trace = tmp_path / "t.jsonl"
    assert run("simulate", "--env", "lifted_chain", "--steps", 500, "--out", trace) == 0
    code = run("certify", "--oracle-chain", "--epsilon", 0.05, "--delta", 0.05, "--gamma", 0.5, "--trace", trace, "--burn-in", 0)
    assert code == 1
    assert "needs T >=" in capsys.readouterr().err


def test_certify_bad_params_exit_2():
    assert run("certify", "--oracle-chain", "--epsilon", 0, "--delta", 0.05, "--gamma", 0.5) == 2
    assert run("certify", "--epsilon", 0.1, "--delta", 0.05, "--gamma", 0.5) == 2


def test_certify_trace_env_mismatch(tmp_path):
    trace = tmp_path / "t.jsonl"
    run("simulate", "--env", "cartpole", "--steps", 50, "--out", trace)
    assert run("certify", "--oracle-chain", "--epsilon", 0.05, "--delta", 0.05, "--gamma", 0.5, "--trace", trace) == 2


def test_export_prism_oracle_chain_round_trip(tmp_path):
    prefix = tmp_path / "chain"
    assert run("export-prism", "--oracle-chain", "--with-policy", "--out", prefix) == 0
    n, _, _ = parse_explicit(prefix)
    m = import_prism(prefix)
    again = tmp_path / "again"
    m.save(tmp_path / "m.json")
    assert run("export-prism", "--model", tmp_path / "m.json", "--out", again) == 0
    for ext in (".tra", ".lab", ".srew"):
        a = prefix.with_name(prefix.name + ext).read_bytes()
        b = again.with_name(again.name + ext).read_bytes()
        assert a == b
    assert n == len(m.states())


def test_export_prism_smoothing(tmp_path):
    rows = {(0, 0): (np.array([1]), np.array([1.0])), (1, 0): (np.array([0]), np.array([1.0]))}
    m = LatentMdp(n_bits=1, n_ap=1, n_actions=2, rows=rows, rewards={(0, 0): 0.5, (1, 0): 0.0})
    m.save(tmp_path / "m.json")
    assert run("export-prism", "--model", tmp_path / "m.json", "--smoothing", "add-one", "--out", tmp_path / "s") == 0
    n, nc, _ = parse_explicit(tmp_path / "s")
    assert (n, nc) == (2, 4)
    assert run("export-prism", "--model", tmp_path / "m.json", "--out", tmp_path / "p") == 0
    assert parse_explicit(tmp_path / "p")[:2] == (2, 2)


def test_bisim_oracle_matches_fixture(capsys):
    fx = cli.load_bisim_fixture()
    for variant in ("reward", "label"):
        assert run("bisim-oracle", "--variant", variant) == 0
        rows = list(csv.reader(io.StringIO(capsys.readouterr().out)))
        assert rows[0] == ["s1", "s2", "distance"]
        d = np.zeros((4, 4))
        for s1, s2, v in rows[1:]:
            d[int(s1), int(s2)] = float(v)
        assert np.max(np.abs(d - np.array(fx["distances"][variant]))) <= 1e-9


def test_bisim_oracle_needs_gamma_with_mdp(tmp_path):
    rows = {(0, 0): (np.array([0]), np.array([1.0]))}
    m = LatentMdp(n_bits=1, n_ap=1, n_actions=1, rows=rows, rewards={(0, 0): 0.0})
    m.save(tmp_path / "m.json")
    assert run("bisim-oracle", "--mdp", tmp_path / "m.json") == 2


def test_train_then_distill_eval(tmp_path, capsys):
    cfg = {
        "env": {"id": "cartpole"},
        "seed": 3,
        "vae": {"n_bits": 4, "hidden": [16, 16], "warmup": 256, "batch": 32, "steps": 800, "eval_interval": 400,
                "eval_batch": 128, "mdp_steps": 500, "capacity": 5000, "eval_episodes": 1},
    }
    run_dir = tmp_path / "run"
    assert run("train", "--config", _write(tmp_path, cfg), "--out", run_dir) == 0
    for f in ("model.json", "latent_mdp.json", "latent_policy.json", "metrics.csv", "run_config.json", "best_model.json"):
        assert (run_dir / f).exists(), f
    with (run_dir / "metrics.csv").open() as fh:
        assert next(csv.reader(fh)) == list(cli.vae.METRICS_HEADER)
    capsys.readouterr()
    assert run("distill-eval", "--model", run_dir, "--episodes", 3, "--out", tmp_path / "e.json") == 0
    rep = json.loads((tmp_path / "e.json").read_text())
    assert len(rep["returns"]) == 3 and rep["mean"] == pytest.approx(np.mean(rep["returns"]))
    assert run("distill-eval", "--model", run_dir / "best_model.json", "--episodes", 2) == 0
    assert run("distill-eval", "--model", tmp_path / "nothing") == 2
    cert = tmp_path / "cert.json"
    assert run("certify", "--model", run_dir, "--epsilon", 0.1, "--delta", 0.1, "--gamma", 0.5, "--loss-only",
               "--refit", "--unsupported", "max", "--out", cert) == 0
    assert json.loads(cert.read_text())["provenance"]["refit"] is True
    assert run("export-prism", "--model", run_dir, "--with-policy", "--out", tmp_path / "lm") == 0
    parse_explicit(tmp_path / "lm")


def test_train_until_and_resume(tmp_path):
    cfg = {
        "vae": {"n_bits": 4, "hidden": [16, 16], "warmup": 256, "batch": 32, "steps": 640, "eval_interval": 320,
                "eval_batch": 64, "mdp_steps": 300, "capacity": 2000},
    }
    path = _write(tmp_path, cfg)
    assert run("train", "--config", path, "--out", tmp_path / "a") == 0
    assert run("train", "--config", path, "--out", tmp_path / "b", "--until", 320) == 0
    assert run("train", "--resume", tmp_path / "b" / "checkpoints" / "latest", "--out", tmp_path / "b") == 0
    assert (tmp_path / "a" / "metrics.csv").read_text() == (tmp_path / "b" / "metrics.csv").read_text()
    assert (tmp_path / "a" / "latent_mdp.json").read_text() == (tmp_path / "b" / "latent_mdp.json").read_text()
    assert run("train", "--resume", "x", "--config", path, "--out", tmp_path / "c") == 2


def test_shipped_desk_config_parses():
    cfg, vcfg = cli.load_run_config(Path(__file__).resolve().parents[1] / "configs" / "cartpole_desk.json")
    assert cfg["env"]["id"] == "cartpole" and vcfg.n_bits == 9 and vcfg.hidden == (64, 64)
    assert vcfg.steps >= 200_000 and vcfg.buffer_mode == "bucket"
