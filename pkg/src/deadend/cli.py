"""Pipeline orchestration: generate -> split -> train -> flag -> analyze ->
report, every stage communicating only through files.

Each subcommand writes its artifacts plus the fully resolved configuration
into the output directory. Exit codes: 0 success, 2 input/contract error,
1 computation failure. Runs with equal resolved configs and seeds produce
byte-identical artifacts.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

from . import analysis, cohort, data, encoder as enc, learn, lifegate, solve
from .errors import ComputeError, ConfigError, ContractError
from .flags import Thresholds
from .mdp import DualKind, TabularMDP

DEFAULTS: dict = {
    "seed": 0,
    "thresholds": {"red": {"d": -0.25, "r": 0.75}, "yellow": {"d": -0.15, "r": 0.85}},
    "split": {"train": 0.75, "val": 0.05, "test": 0.20},
    "cohort": {
        "n_states": 30, "n_actions": 4, "dead_end_fraction": 0.15,
        "branching": 3, "obs_dim": 8, "obs_noise_sd": 0.05, "max_len": 18,
    },
    "rollout": {"n_trajectories": 1000, "policy": "uniform", "eps": 0.1, "bias": 3.0},
    "encoder": {"embed_dim": 64, "window": 8, "hidden": [64], "lr": 5e-4,
                "epochs": 600, "batch": 64},
    "dqn": {"hidden": 64, "lr": 1e-4, "batch": 64, "target_sync": 2000, "updates": 20000},
    "tabular_q": {"lr": 0.1, "sweeps": 10, "visit_decay": False},
    "lifegate": {"death_drift": 0.4, "deadend_drift_right": 0.7},
    "solver": {"tol": 1e-9, "max_sweeps": 100000},
    "theorems": {"n_states": 30, "n_actions": 4, "dead_end_fraction": 0.15},
    "analysis": {"max_horizon": 18, "pre_steps": 6, "post_steps": 4, "k_frac": 0.2},
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where} must be a mapping")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path: str | None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = _merge(cfg, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    return cfg


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _finish(out: Path, cfg: dict) -> None:
    _write_json(out / "resolved_config.json", cfg)


def _thresholds(cfg: dict) -> Thresholds:
    return Thresholds.from_json_dict(cfg["thresholds"])


def _layout_from_args(args, cfg) -> lifegate.LifeGateLayout:
    drifts = {
        "death_drift": cfg["lifegate"]["death_drift"],
        "deadend_drift_right": cfg["lifegate"]["deadend_drift_right"],
    }
    if args.layout and args.layout != "default":
        return lifegate.LifeGateLayout.from_file(args.layout, **drifts)
    return lifegate.LifeGateLayout.default(**drifts)


# -- subcommands ---------------------------------------------------------------


def cmd_gen_lifegate(args) -> int:
    cfg = load_config(args.config, {"seed": args.seed} if args.seed is not None else None)
    out = _out_dir(args)
    layout = _layout_from_args(args, cfg)
    mdp = lifegate.build_lifegate(layout)
    mdp.save(out / "mdp.json")
    (out / "layout.txt").write_text("\n".join(layout.rows) + "\n")
    _finish(out, cfg)
    print(f"wrote {mdp.n_states}-state life-gate MDP to {out}")
    return 0


def cmd_gen_synthetic(args) -> int:
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.n_traj is not None:
        overrides.setdefault("rollout", {})["n_trajectories"] = args.n_traj
    if args.policy:
        overrides.setdefault("rollout", {})["policy"] = args.policy
    cfg = load_config(args.config, overrides)
    out = _out_dir(args)

    spec = cohort.CohortSpec(seed=cfg["seed"], **cfg["cohort"])
    generated = cohort.generate_mdp(spec)
    emitter = None if args.tabular else cohort.emit_observations(generated.mdp, spec)

    name = cfg["rollout"]["policy"]
    if name == "uniform":
        policy = cohort.uniform_policy(generated.mdp)
    elif name == "harmful":
        policy = cohort.harmful_biased_policy(
            generated.mdp, generated.truth, bias=cfg["rollout"]["bias"]
        )
    elif name == "eps-greedy":
        q = solve.value_iteration(generated.mdp, DualKind.R, tol=cfg["solver"]["tol"])
        policy = cohort.epsilon_greedy_policy(q.values, cfg["rollout"]["eps"])
    else:
        raise ConfigError(f"unknown behavior policy {name!r}")

    trajectories = cohort.rollout_behavior(
        generated.mdp, policy,
        n_trajectories=cfg["rollout"]["n_trajectories"],
        seed=cfg["seed"], max_len=spec.max_len, emitter=emitter,
    )
    cohort.save_bundle(out, generated, emitter, trajectories)
    _finish(out, cfg)
    n_neg = sum(1 for t in trajectories if t.outcome.label == "negative")
    print(f"wrote {len(trajectories)} trajectories ({n_neg} negative) to {out}")
    return 0


def cmd_split(args) -> int:
    overrides = {"seed": args.seed} if args.seed is not None else None
    cfg = load_config(args.config, overrides)
    out = _out_dir(args)
    trajectories = data.load_jsonl(args.cohort)
    spec = data.SplitSpec(seed=cfg["seed"], **cfg["split"])
    train, val, test = data.split(trajectories, spec)
    data.save_jsonl(out / "train.jsonl", train)
    data.save_jsonl(out / "val.jsonl", val)
    data.save_jsonl(out / "test.jsonl", test)
    _write_json(out / "split_counts.json", {
        "train": len(train), "val": len(val), "test": len(test),
    })
    _finish(out, cfg)
    print(f"split {len(trajectories)} -> {len(train)}/{len(val)}/{len(test)}")
    return 0


def cmd_train_sc(args) -> int:
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["encoder"] = {"epochs": args.epochs}
    cfg = load_config(args.config, overrides)
    out = _out_dir(args)
    trajectories = data.load_jsonl(args.cohort)
    config = enc.EncoderConfig(
        embed_dim=cfg["encoder"]["embed_dim"],
        window=cfg["encoder"]["window"],
        hidden=tuple(cfg["encoder"]["hidden"]),
        lr=cfg["encoder"]["lr"],
        epochs=cfg["encoder"]["epochs"],
        batch=cfg["encoder"]["batch"],
    )
    model, curve = enc.train_sc(trajectories, config, seed=cfg["seed"])
    model.encoder.save(out / "encoder.json")
    analysis.write_csv(
        out / "sc_loss.csv",
        [{"epoch": i, "nll": v} for i, v in enumerate(curve)],
        ["epoch", "nll"],
    )
    _finish(out, cfg)
    print(f"trained encoder for {config.epochs} epochs; final NLL {curve[-1]:.6g}")
    return 0


def _train_q(args, kind: DualKind) -> int:
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.updates is not None:
        overrides["dqn"] = {"updates": args.updates}
    cfg = load_config(args.config, overrides)
    out = _out_dir(args)
    trajectories = data.load_jsonl(args.cohort)
    tag = kind.value.lower()

    if args.tabular:
        mdp = TabularMDP.load(args.mdp)
        table = learn.tabular_q_learning(
            trajectories, mdp.n_states, mdp.n_actions, kind,
            lr=cfg["tabular_q"]["lr"], sweeps=cfg["tabular_q"]["sweeps"],
            seed=cfg["seed"], visit_decay=cfg["tabular_q"]["visit_decay"],
        )
        table.save(out / f"qtable_{tag}.json")
        print(f"tabular Q ({kind.value}) over {cfg['tabular_q']['sweeps']} sweeps")
    else:
        encoder = enc.HistoryEncoder.load(args.encoder)
        buffers = data.TransitionBuffers.build(trajectories)
        config = learn.DQNConfig(
            hidden=cfg["dqn"]["hidden"], lr=cfg["dqn"]["lr"],
            target_sync=cfg["dqn"]["target_sync"], updates=cfg["dqn"]["updates"],
        )
        net, curve = learn.fit_double_q(buffers, encoder, config, kind, seed=cfg["seed"])
        net.save(out / f"qnet_{tag}.json")
        analysis.write_csv(
            out / f"q_{tag}_loss.csv",
            [{"update": i, "loss": v} for i, v in enumerate(curve)],
            ["update", "loss"],
        )
        print(f"double-Q ({kind.value}) for {config.updates} updates; "
              f"final loss {curve[-1]:.6g}")
    _finish(out, cfg)
    return 0


def cmd_train_d(args) -> int:
    return _train_q(args, DualKind.D)


def cmd_train_r(args) -> int:
    return _train_q(args, DualKind.R)


def cmd_solve_exact(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args)
    layout = None
    if args.mdp:
        mdp = TabularMDP.load(args.mdp)
    else:
        layout = _layout_from_args(args, cfg)
        mdp = lifegate.build_lifegate(layout)
    q_d = solve.value_iteration(mdp, DualKind.D, tol=cfg["solver"]["tol"],
                                max_sweeps=cfg["solver"]["max_sweeps"])
    q_r = solve.value_iteration(mdp, DualKind.R, tol=cfg["solver"]["tol"],
                                max_sweeps=cfg["solver"]["max_sweeps"])
    sets = solve.classify_special_states(mdp)
    report = solve.verify_theorem1(mdp)
    q_d.save(out / "qtable_d.json")
    q_r.save(out / "qtable_r.json")
    sets.save(out / "special_sets.json")
    _write_json(out / "theorem_report.json", report.to_json_dict())
    (out / "theorem_report.txt").write_text(report.text() + "\n")
    if layout is not None:
        (out / "vd_grid.csv").write_text(
            lifegate.render_value_grid(layout, q_d.state_values()))
        (out / "vr_grid.csv").write_text(
            lifegate.render_value_grid(layout, q_r.state_values()))
    _finish(out, cfg)
    print(report.text())
    return 0 if report.all_passed else 1


def cmd_verify_theorems(args) -> int:
    overrides = {"seed": args.seed} if args.seed is not None else None
    cfg = load_config(args.config, overrides)
    out = _out_dir(args)
    results = []
    all_ok = True
    for i in range(args.seeds):
        spec = cohort.CohortSpec(
            n_states=cfg["theorems"]["n_states"],
            n_actions=cfg["theorems"]["n_actions"],
            dead_end_fraction=cfg["theorems"]["dead_end_fraction"],
            seed=cfg["seed"] + i,
        )
        generated = cohort.generate_mdp(spec)
        report = solve.verify_theorem1(generated.mdp)
        all_ok = all_ok and report.all_passed
        results.append({"seed": spec.seed, **report.to_json_dict()})
    _write_json(out / "theorems.json", {"all_passed": all_ok, "runs": results})
    _finish(out, cfg)
    print(f"{args.seeds} seeded MDPs: {'all passed' if all_ok else 'FAILURES'}")
    return 0 if all_ok else 1


def cmd_flag(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args)
    trajectories = data.load_jsonl(args.cohort)
    thresholds = _thresholds(cfg)
    if args.qtable_d:
        q_d = solve.QTable.load(args.qtable_d)
        q_r = solve.QTable.load(args.qtable_r)
        flagged = analysis.flag_with_tables(trajectories, q_d, q_r, thresholds)
    else:
        if not (args.encoder and args.qd and args.qr):
            raise ConfigError("flag needs --qtable-d/--qtable-r or --encoder/--qd/--qr")
        encoder = enc.HistoryEncoder.load(args.encoder)
        qd_net = learn.QNetwork.load(args.qd)
        qr_net = learn.QNetwork.load(args.qr)
        if qd_net.input_dim != encoder.embed_dim:
            raise ConfigError(
                f"checkpoint mismatch: encoder embeds {encoder.embed_dim}, "
                f"network expects {qd_net.input_dim}"
            )
        flagged = analysis.flag_with_networks(trajectories, encoder, qd_net, qr_net, thresholds)
    flagged.to_csv(out / "flags.csv")
    flagged.save_values(out / "values.jsonl")
    _write_json(out / "manifest.json", {
        "cohort": str(args.cohort),
        "thresholds": thresholds.to_json_dict(),
        "models": {
            "qtable_d": args.qtable_d, "qtable_r": args.qtable_r,
            "encoder": args.encoder, "qd": args.qd, "qr": args.qr,
        },
    })
    _finish(out, cfg)
    print(f"flagged {len(trajectories)} trajectories -> {out / 'flags.csv'}")
    return 0


def cmd_analyze(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args)
    trajectories = data.load_jsonl(args.cohort)
    thresholds = _thresholds(cfg)
    flagged = analysis.FlaggedCohort.from_values_file(trajectories, args.values, thresholds)

    rows = analysis.flag_emergence(flagged, max_horizon=cfg["analysis"]["max_horizon"])
    analysis.write_csv(out / "emergence.csv", rows, analysis.EMERGENCE_COLUMNS)
    rows = analysis.flag_duration(flagged)
    analysis.write_csv(out / "duration.csv", rows, analysis.DURATION_COLUMNS)
    window = analysis.AlignmentWindow(cfg["analysis"]["pre_steps"], cfg["analysis"]["post_steps"])
    obs0 = trajectories[0].transitions[0].state_or_obs
    features = list(range(len(obs0))) if not isinstance(obs0, int) else None
    rows = analysis.first_flag_alignment(flagged, features=features, window=window)
    analysis.write_csv(out / "alignment.csv", rows, analysis.ALIGNMENT_COLUMNS)
    rows = analysis.value_gap_rows(flagged, k_frac=cfg["analysis"]["k_frac"])
    analysis.write_csv(out / "value_gap.csv", rows, analysis.VALUE_GAP_COLUMNS)
    _write_json(out / "manifest.json", {
        "cohort": str(args.cohort),
        "values": str(args.values),
        "thresholds": thresholds.to_json_dict(),
        "outputs": ["emergence.csv", "duration.csv", "alignment.csv", "value_gap.csv"],
    })
    _finish(out, cfg)
    print(f"analysis CSVs written to {out}")
    return 0


def cmd_report(args) -> int:
    src = Path(args.analysis)
    lines = ["analysis report", "================"]
    emergence = (src / "emergence.csv").read_text().splitlines()
    header = emergence[0].split(",")
    rows = [dict(zip(header, line.split(","))) for line in emergence[1:]]
    final = [r for r in rows if r["bucket"] == "-1"
             and r["criterion"] == "full" and r["basis"] == "median"]
    for r in final:
        lines.append(
            f"final step ({r['outcome']}): red {float(r['pct_red']):.1f}%  "
            f"yellow {float(r['pct_yellow']):.1f}%  none {float(r['pct_none']):.1f}%  "
            f"(n={r['n']})"
        )
    duration = (src / "duration.csv").read_text().splitlines()
    header = duration[0].split(",")
    rows = [dict(zip(header, line.split(","))) for line in duration[1:]]
    for r in rows:
        if r["measure"] == "starts_no_flag" and r["k"] == "2":
            lines.append(
                f"starts first 2 steps unflagged ({r['outcome']}): {float(r['pct']):.1f}%"
            )
    text = "\n".join(lines) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text)
    print(text, end="")
    return 0


# -- wiring ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deadend",
        description="dead-end discovery pipeline: generate, solve, train, flag, analyze",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.set_defaults(fn=fn)
        p.add_argument("--config", help="JSON config file (unknown keys rejected)")
        p.add_argument("--seed", type=int, help="master seed override")
        return p

    p = add("gen-lifegate", cmd_gen_lifegate, help="build the life-gate MDP")
    p.add_argument("--layout", default="default", help="layout text file or 'default'")
    p.add_argument("--out", required=True)

    p = add("gen-synthetic", cmd_gen_synthetic, help="generate a synthetic cohort bundle")
    p.add_argument("--out", required=True)
    p.add_argument("--n-traj", type=int)
    p.add_argument("--policy", choices=["uniform", "harmful", "eps-greedy"])
    p.add_argument("--tabular", action="store_true", help="state-indexed (no observations)")

    p = add("split", cmd_split, help="75/5/20 outcome-stratified split")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True)

    p = add("train-sc", cmd_train_sc, help="train the history encoder")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)

    for name, fn in (("train-d", cmd_train_d), ("train-r", cmd_train_r)):
        p = add(name, fn, help=f"fit the {name[-1].upper()} value model")
        p.add_argument("--cohort", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--encoder")
        p.add_argument("--tabular", action="store_true")
        p.add_argument("--mdp", help="mdp.json (tabular mode, for dimensions)")
        p.add_argument("--updates", type=int)

    p = add("solve-exact", cmd_solve_exact, help="exact values, special sets, theorem report")
    p.add_argument("--mdp")
    p.add_argument("--layout", default="default")
    p.add_argument("--out", required=True)

    p = add("verify-theorems", cmd_verify_theorems, help="theorem suite over seeded MDPs")
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--out", required=True)

    p = add("flag", cmd_flag, help="per-step flags for a cohort")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--qtable-d")
    p.add_argument("--qtable-r")
    p.add_argument("--encoder")
    p.add_argument("--qd")
    p.add_argument("--qr")

    p = add("analyze", cmd_analyze, help="emergence/duration/alignment/value-gap CSVs")
    p.add_argument("--cohort", required=True)
    p.add_argument("--values", required=True, help="values.jsonl from the flag stage")
    p.add_argument("--out", required=True)

    p = add("report", cmd_report, help="human-readable summary of an analysis directory")
    p.add_argument("--analysis", required=True)
    p.add_argument("--out")

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ContractError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ComputeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
