"""Command-line entry point: ``latentcert <command> ...``.

Exit codes: 0 success, 1 runtime error, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff, checker, latent, pac, vae
from .core import read_trace, rollout, write_trace
from .envs import ENV_IDS, LiftedChainSpec, heuristic_policy, make_env, random_policy

RUN_CONFIG_KEYS = {"env", "vae", "pac", "out", "seed"}
ENV_BLOCK_KEYS = {"id", "config", "policy"}


class UsageError(ValueError):
    pass


def config_hash(obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _chain_config(block):
    """Turn a JSON ``chain`` block into a spec object for :func:`make_env`."""
    if not block:
        return None
    block = dict(block)
    for k in ("transition_matrix", "node_rewards", "node_labels", "policy_table"):
        if k in block:
            block[k] = np.asarray(block[k], dtype=np.float64 if k != "node_labels" else np.uint8)
    return LiftedChainSpec(**block)


def build_env(env_id, env_config=None):
    cfg = dict(env_config or {})
    if "chain" in cfg:
        cfg["spec"] = _chain_config(cfg.pop("chain"))
    try:
        return make_env(env_id, cfg)
    except (ValueError, TypeError) as e:
        raise UsageError(str(e)) from None


def input_policy(env, name):
    if name == "heuristic":
        return heuristic_policy(env)
    if name == "random":
        return random_policy(env)
    raise UsageError(f"unknown policy {name!r}; expected 'heuristic' or 'random'")


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


def load_run_config(path):
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read config {path}: {e}") from None
    return parse_run_config(raw)


def parse_run_config(raw):
    if not isinstance(raw, dict):
        raise UsageError("run config must be a JSON object")
    unknown = sorted(set(raw) - RUN_CONFIG_KEYS)
    if unknown:
        raise UsageError(f"unknown run config keys: {unknown}")
    env_block = dict(raw.get("env", {}))
    bad = sorted(set(env_block) - ENV_BLOCK_KEYS)
    if bad:
        raise UsageError(f"unknown env block keys: {bad}")
    env_block.setdefault("id", "cartpole")
    env_block.setdefault("policy", "heuristic")
    env_block.setdefault("config", {})
    vae_block = dict(raw.get("vae", {}))
    seed = int(raw.get("seed", vae_block.get("seed", 0)))
    if "seed" in vae_block and vae_block["seed"] != seed:
        raise UsageError("vae.seed disagrees with the top-level seed")
    vae_block["seed"] = seed
    try:
        vcfg = vae.VaeConfig.from_json(vae_block)
    except (ValueError, TypeError) as e:
        raise UsageError(f"invalid vae block: {e}") from None
    pac_block = raw.get("pac")
    if pac_block is not None:
        bad = sorted(set(pac_block) - {"epsilon", "delta", "gamma"})
        if bad:
            raise UsageError(f"unknown pac block keys: {bad}")
        try:
            pac.PacParams(**pac_block)
        except (ValueError, TypeError) as e:
            raise UsageError(f"invalid pac block: {e}") from None
    cfg = {"env": env_block, "vae": vcfg.to_json(), "pac": pac_block, "seed": seed, "out": raw.get("out")}
    return cfg, vcfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(args):
    env = build_env(args.env, json.loads(args.env_config) if args.env_config else None)
    policy = input_policy(env, args.policy)
    if args.steps < 1:
        raise UsageError("--steps must be >= 1")
    h = config_hash({"cmd": "simulate", "env": args.env, "env_config": args.env_config, "policy": args.policy, "steps": args.steps, "seed": args.seed})
    trace = rollout(env, policy, args.steps, args.seed)
    write_trace(args.out, trace, {"config_hash": h, "policy": args.policy})
    print(f"wrote {args.steps} transitions to {args.out} (config {h})")
    return 0


def _base_policy_from(cfg, env):
    return input_policy(env, cfg["env"]["policy"])


def cmd_train(args):
    if args.resume and args.config:
        raise UsageError("use either --config or --resume")
    if args.resume:
        out = Path(args.out)
        cfg = json.loads((out / "run_config.json").read_text())
        cfg, vcfg = parse_run_config({k: v for k, v in cfg.items() if k in RUN_CONFIG_KEYS})
        env = build_env(cfg["env"]["id"], cfg["env"]["config"])
        ck = Path(args.resume)
        if ck.name == "latest" or ck.is_file():
            ck = out / "checkpoints" / ck.read_text().strip()
        tr = vae.Trainer.resume(env, _base_policy_from(cfg, env), ck, out, vcfg)
    else:
        if not args.config:
            raise UsageError("--config is required")
        cfg, vcfg = load_run_config(args.config)
        out = Path(args.out or cfg["out"] or "run")
        env = build_env(cfg["env"]["id"], cfg["env"]["config"])
        out.mkdir(parents=True, exist_ok=True)
        if (out / "metrics.csv").exists():
            (out / "metrics.csv").unlink()
        h = config_hash({k: cfg[k] for k in ("env", "vae", "pac", "seed")})
        (out / "run_config.json").write_text(json.dumps(dict(cfg, out=str(out), config_hash=h), sort_keys=True, indent=1) + "\n")
        tr = vae.Trainer(env, _base_policy_from(cfg, env), vcfg, out)
    try:
        tr.run(until=args.until)
    except vae.TrainingDivergedError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    if args.until is not None and tr.t < vcfg.steps:
        ck = tr.checkpoint()
        print(f"stopped at step {tr.t}; checkpoint {ck}")
        return 0
    res = vae.finish(tr, extract=True)
    print(f"trained {res.steps} steps ({res.updates} updates); latent MDP with {len(res.latent_mdp.states())} states -> {out}")
    return 0


def _parse_props(text):
    if not text:
        return ()
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"atomic propositions must be comma-separated indices, got {text!r}") from None


class _Subject:
    """What certify/export operate on: env, embedding, latent model and policy."""

    def __init__(self, env, emb, m, table, ground_policy, action_record=None, digest=None, hash_input=None):
        self.env, self.emb, self.m, self.table = env, emb, m, table
        self.ground_policy = ground_policy
        self.action_record = action_record
        self.digest = digest
        self.hash_input = hash_input or {}


def _load_subject(args):
    if args.oracle_chain:
        env_cfg = json.loads(Path(args.chain_config).read_text()) if args.chain_config else {}
        env = build_env("lifted_chain", {"chain": env_cfg} if env_cfg else None)
        m, table, emb = latent.chain_latent_mdp(env)
        return _Subject(env, emb, m, table, heuristic_policy(env), None, config_hash(m.to_json()), {"oracle_chain": env_cfg})
    if not args.model:
        raise UsageError("--model or --oracle-chain is required")
    d = Path(args.model)
    if not (d / "model.json").exists():
        raise UsageError(f"{d} has no model.json")
    run_cfg = json.loads((d / "run_config.json").read_text()) if (d / "run_config.json").exists() else {}
    env_block = run_cfg.get("env", {})
    _, meta = autodiff.load_arrays(d / "model.json")
    env = build_env(meta["env_id"], env_block.get("config"))
    model, _ = vae.load_model(d / "model.json", env)
    m = latent.LatentMdp.load(d / "latent_mdp.json")
    table = latent.LatentPolicyTable.from_json(json.loads((d / "latent_policy.json").read_text()))
    record = [] if not model.shared_actions else None
    pol = vae.distilled_policy(model, env, greedy=True, record=record)
    subj = _Subject(env, vae.embedding(model, env), m, table, pol, record, _file_digest(d / "latent_mdp.json"), {"model": _file_digest(d / "model.json")})
    subj.model = model
    return subj


def _embed(subj, trace):
    if subj.emb.psi is None:
        return latent.embed_trace(trace, subj.emb)
    if subj.action_record is not None and len(subj.action_record) == len(trace):
        it = iter(subj.action_record)
        return latent.embed_trace(trace, subj.emb, action_encoder=lambda s, a: next(it))
    model = subj.model

    def enc(s, a):
        bits = model.encode_bits(np.asarray(s)[None], subj.env.label(s)[None])
        return int(model.latent_action_mode(bits, np.asarray(a)[None])[0])

    return latent.embed_trace(trace, subj.emb, action_encoder=enc)


def cmd_certify(args):
    try:
        params = pac.PacParams(args.epsilon, args.delta, args.gamma)
    except ValueError as e:
        raise UsageError(str(e)) from None
    T_props, C_props = _parse_props(args.T), _parse_props(args.C)
    kind = {"return": "discounted_return", "reach": "reach", "constrained-reach": "constrained_reach"}[args.objective]
    if kind != "discounted_return":
        try:
            objective = checker.Objective(kind, args.gamma, T_props, C_props)
        except ValueError as e:
            raise UsageError(str(e)) from None
    subj = _load_subject(args)
    m, table = subj.m, subj.table
    chain = checker.induce_chain(m, table, strict=False)
    consts = checker.lipschitz_constants(chain, args.gamma)
    need_loss = pac.required_samples_loss(params)
    need_value = pac.required_samples_value(params, consts.KV)
    need = need_loss if args.loss_only else max(need_loss, need_value)
    if args.trace:
        trace = read_trace(args.trace)
        if trace.env_id != subj.env.env_id:
            raise UsageError(f"trace env {trace.env_id!r} does not match model env {subj.env.env_id!r}")
        trace_seed = trace.seed
    else:
        steps = args.steps or args.burn_in + need * args.thin
        if subj.action_record is not None:
            subj.action_record.clear()
        trace = rollout(subj.env, subj.ground_policy, steps, args.seed)
        trace_seed = args.seed
    lt = _embed(subj, trace)
    if args.refit:
        kept = pac.select_samples(lt, args.burn_in, args.thin)
        m = latent.estimate_latent_mdp(kept, m.n_bits, m.n_ap, m.n_actions)
        m.metadata.update({"source": "refit"})
        if hasattr(subj, "model"):
            states = m.states()
            P = vae.latent_policy_probs(subj.model, latent.int_to_bits(states, m.n_bits), greedy=True)
            table = latent.LatentPolicyTable({int(z): P[k] for k, z in enumerate(states)}, table.n_actions)
        consts = checker.lipschitz_constants(checker.induce_chain(m, table, strict=False), args.gamma)
    est = pac.estimate_losses(
        lt, m, params, args.burn_in, args.thin,
        reward_kind="transition" if subj.env.env_id != "lifted_chain" else "state_action",
        on_unsupported=args.unsupported,
    )
    obj_names = {"discounted_return": ("return",), "reach": ("reach",), "constrained_reach": ("constrained_reach",)}[kind]
    h = config_hash(dict(subj.hash_input, cmd="certify", epsilon=args.epsilon, delta=args.delta, gamma=args.gamma,
                         objective=args.objective, T=T_props, C=C_props, seed=args.seed, burn_in=args.burn_in,
                         thin=args.thin, refit=args.refit, loss_only=args.loss_only, steps=args.steps, unsupported=args.unsupported))
    prov = {
        "config_hash": h,
        "seed": trace_seed,
        "trace_digest": pac.digest_trace(trace),
        "latent_mdp_digest": subj.digest,
        "refit": bool(args.refit),
        "unsupported": args.unsupported,
        "value_samples_required": not args.loss_only,
    }
    report = pac.assemble_certificate(est, consts, obj_names, prov, require_value_samples=not args.loss_only)
    out = report.to_json()
    if kind != "discounted_return":
        try:
            vt = checker.value_iteration(m, table, objective, tol=1e-10)
            out["latent_values"] = {str(k): v for k, v in sorted(vt.values.items())}
        except LookupError as e:
            out["latent_values_error"] = str(e)
    text = json.dumps(out, sort_keys=True, indent=1) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    b = out["bounds"]
    print(f"T={out['T']} LR={est.L_R_hat:.6g} LP={est.L_P_hat:.6g} value_diff_return={b['value_diff_return']} value_diff_reach={b['value_diff_reach']} vacuous={b['vacuous']} (config {h})")
    return 0


def cmd_export_prism(args):
    if args.oracle_chain:
        subj = _load_subject(args)
        m, table = subj.m, subj.table
    else:
        if not args.model:
            raise UsageError("--model or --oracle-chain is required")
        d = Path(args.model)
        src = d / "latent_mdp.json" if d.is_dir() else d
        m = latent.LatentMdp.load(src)
        pol_path = d / "latent_policy.json" if d.is_dir() else None
        table = latent.LatentPolicyTable.from_json(json.loads(pol_path.read_text())) if pol_path and pol_path.exists() else None
    if args.smoothing == "add-one":
        m = latent.fill_missing_pairs(m)
    m = checker.close_deadlocks(m)
    if table is not None:
        # closed deadlocks play action 0
        probs = dict(table.probs)
        for z in m.metadata.get("closed_deadlocks", []):
            probs.setdefault(int(z), np.eye(m.n_actions)[0])
        table = latent.LatentPolicyTable(probs, table.n_actions)
    written = checker.export_prism(m, args.out, policy=table if args.with_policy else None)
    print("wrote " + " ".join(str(p) for p in written))
    return 0


def load_bisim_fixture():
    text = resources.files("latentcert").joinpath("data/bisim_fixture.json").read_text()
    return json.loads(text)


def cmd_bisim_oracle(args):
    if args.mdp:
        m = latent.LatentMdp.load(args.mdp)
        table = latent.LatentPolicyTable.from_json(json.loads(Path(args.policy).read_text())) if args.policy else None
        chain = checker.induce_chain(m, table, strict=True)
        gamma = args.gamma
    else:
        fx = load_bisim_fixture()
        chain = checker.chain_from_dense(fx["P"], fx["R"], fx["labels"])
        gamma = fx["gamma"] if args.gamma is None else args.gamma
    if gamma is None:
        raise UsageError("--gamma is required with --mdp")
    d, iters = checker.bisim_pseudometric(chain, args.variant, gamma, tol=args.tol)
    rows = [["s1", "s2", "distance"]] + [[int(chain.states[i]), int(chain.states[j]), repr(float(d[i, j]))] for i in range(chain.n) for j in range(chain.n)]
    if args.out:
        with open(args.out, "w", newline="") as fh:
            csv.writer(fh).writerows(rows)
    else:
        csv.writer(sys.stdout).writerows(rows)
    print(f"# {args.variant} pseudometric, gamma={gamma}, {iters} sweeps", file=sys.stderr)
    return 0


def cmd_distill_eval(args):
    d = Path(args.model)
    path = d / "model.json" if d.is_dir() else d
    if not path.exists():
        raise UsageError(f"no model at {path}")
    _, meta = autodiff.load_arrays(path)
    run_cfg = json.loads((path.parent / "run_config.json").read_text()) if (path.parent / "run_config.json").exists() else {}
    env = build_env(meta["env_id"], run_cfg.get("env", {}).get("config"))
    model, _ = vae.load_model(path, env)
    mean, returns = vae.distill_eval(env, model, args.episodes, args.seed, greedy=not args.sample)
    h = config_hash({"cmd": "distill-eval", "model": _file_digest(path), "episodes": args.episodes, "seed": args.seed, "sample": args.sample})
    if args.out:
        Path(args.out).write_text(json.dumps({"mean": mean, "returns": returns, "episodes": args.episodes, "seed": args.seed, "config_hash": h}, indent=1) + "\n")
    print(f"mean return over {args.episodes} episodes: {mean:.4f} (config {h})")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def version_text():
    return (
        f"latentcert {__version__} (latent-mdp schema {latent.SCHEMA_VERSION}, "
        f"report {pac.REPORT_VERSION}, checkpoint {autodiff.CHECKPOINT_VERSION})"
    )


def build_parser():
    p = argparse.ArgumentParser(prog="latentcert", description="Latent-space MDP abstraction, PAC certificates and model checking.")
    p.add_argument("--version", action="version", version=version_text())
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="roll out a policy and write a JSONL trace")
    s.add_argument("--env", required=True, choices=ENV_IDS)
    s.add_argument("--policy", default="heuristic", choices=("heuristic", "random"))
    s.add_argument("--steps", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--env-config", help="JSON object with env options (labels, chain)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="train the variational model and extract a latent MDP")
    t.add_argument("--config")
    t.add_argument("--out")
    t.add_argument("--resume", help="checkpoint directory (or 'latest' file) to continue from")
    t.add_argument("--until", type=int, help="stop (and checkpoint) after this many env steps")
    t.set_defaults(func=cmd_train)

    def subject_args(q):
        q.add_argument("--model", help="training output directory")
        q.add_argument("--oracle-chain", action="store_true", help="use the exact lifted-chain abstraction")
        q.add_argument("--chain-config", help="JSON file with a lifted-chain spec")

    c = sub.add_parser("certify", help="estimate local losses and assemble bounds")
    subject_args(c)
    c.add_argument("--epsilon", type=float, required=True)
    c.add_argument("--delta", type=float, required=True)
    c.add_argument("--gamma", type=float, required=True)
    c.add_argument("--objective", default="return", choices=("return", "reach", "constrained-reach"))
    c.add_argument("--T", help="target propositions (comma-separated indices)")
    c.add_argument("--C", help="constraint propositions (comma-separated indices)")
    c.add_argument("--trace", help="JSONL trace of the latent policy (otherwise simulated)")
    c.add_argument("--steps", type=int, help="simulated trace length (default: burn-in + required T)")
    c.add_argument("--burn-in", type=int, default=1000)
    c.add_argument("--thin", type=int, default=1)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--refit", action="store_true", help="re-estimate the latent MDP from the certification trace")
    c.add_argument("--loss-only", action="store_true", help="require only the loss sample size")
    c.add_argument("--unsupported", default="raise", choices=("raise", "max"))
    c.add_argument("--out")
    c.set_defaults(func=cmd_certify)

    e = sub.add_parser("export-prism", help="write PRISM explicit files")
    subject_args(e)
    e.add_argument("--with-policy", action="store_true", help="also write the induced chain")
    e.add_argument("--smoothing", default="none", choices=("none", "add-one"), help="fill unvisited pairs (export only)")
    e.add_argument("--out", required=True, help="output path prefix")
    e.set_defaults(func=cmd_export_prism)

    b = sub.add_parser("bisim-oracle", help="bisimulation pseudometric by long iteration")
    b.add_argument("--mdp", help="latent_mdp.json (default: bundled 4-state fixture)")
    b.add_argument("--policy", help="latent_policy.json for --mdp")
    b.add_argument("--variant", default="reward", choices=("reward", "label"))
    b.add_argument("--gamma", type=float)
    b.add_argument("--tol", type=float, default=1e-12)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bisim_oracle)

    d = sub.add_parser("distill-eval", help="average return of the distilled latent policy")
    d.add_argument("--model", required=True)
    d.add_argument("--episodes", type=int, default=30)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--sample", action="store_true", help="sample latent actions instead of taking the argmax")
    d.add_argument("--out")
    d.set_defaults(func=cmd_distill_eval)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except pac.InsufficientSamplesError as e:
        print(f"error: {e}; pass a longer trace or --steps >= burn-in + {e.need}", file=sys.stderr)
        return 1
    except latent.UnsupportedPairError as e:
        print(f"error: {e}; retry with --refit or --unsupported max", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError, LookupError, ArithmeticError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
