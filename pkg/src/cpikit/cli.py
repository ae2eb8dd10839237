"""Command-line front end.

Subcommands:
    train         run one config over its seeds; writes per-seed metrics,
                  the cross-seed aggregate, plot data, and a curve figure
    exact-verify  run the exact tabular scheme and check the
                  error-propagation relations on the resulting trace
    gradcheck     finite-difference audit of both network losses
    compare       relative area-under-curve gain between two finished runs

Exit codes: 0 success, 1 bad configuration/usage, 2 a run or check failed.
"""
from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from . import exact as X
from . import harness as H
from . import mdp as M
from . import neural as N
from .config import ConfigError, load_run_config


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems through ConfigError (exit 1)."""

    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="cpikit", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train agents over one or more seeds")
    t.add_argument("--config", help="config file of key = value lines")
    t.add_argument("--seed", help="comma-separated seed list override")
    t.add_argument("--steps", type=int, help="environment-step budget")
    t.add_argument("--outdir", help="output directory")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", default=[],
                   help="override any config key (repeatable)")

    v = sub.add_parser("exact-verify",
                       help="run the exact scheme and verify its trace")
    v.add_argument("--mdp", help="load a saved tabular model instead")
    v.add_argument("--chain", type=int, metavar="N",
                   help="use the N-state deterministic chain")
    v.add_argument("--states", type=int, default=6)
    v.add_argument("--actions", type=int, default=3)
    v.add_argument("--gamma", type=float, default=0.9)
    v.add_argument("--mdp-seed", type=int, default=0)
    v.add_argument("--iterations", "--iters", type=int, default=30)
    v.add_argument("--m", default="1",
                   help="evaluation sweeps per iteration, or 'inf'")
    v.add_argument("--rate", default="constant",
                   choices=("constant", "kakade", "spi"))
    v.add_argument("--alpha", type=float, default=1.0)
    v.add_argument("--inject-errors", type=float, default=None, metavar="SCALE",
                   help="shorthand setting both noise scales at once")
    v.add_argument("--value-noise", type=float, default=None)
    v.add_argument("--policy-noise", type=float, default=None)
    v.add_argument("--noise-seed", type=int, default=0)
    v.add_argument("--tolerance", type=float, default=1e-9)
    v.add_argument("--outdir", default="exact_out")

    g = sub.add_parser("gradcheck",
                       help="finite-difference audit of both losses")
    g.add_argument("--seeds", type=int, default=5)
    g.add_argument("--hidden", default="16,16")
    g.add_argument("--batch", type=int, default=8)
    g.add_argument("--perturbation", type=float, default=1e-5)
    g.add_argument("--threshold", type=float, default=1e-5)

    c = sub.add_parser("compare",
                       help="area-under-curve gain of run A over run B")
    c.add_argument("--a", required=True, help="run directory (numerator)")
    c.add_argument("--b", required=True, help="run directory (baseline)")
    c.add_argument("--label-a", default="run A")
    c.add_argument("--label-b", default="run B")
    c.add_argument("--outdir", default="compare_out")
    return parser


def _cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.set, {
        "run.seeds": args.seed,
        "run.steps": args.steps,
        "run.outdir": args.outdir,
    })
    result = H.run_sweep(cfg)
    for seed, msg in sorted(result.failures.items()):
        print(f"seed {seed} FAILED: {msg}", file=sys.stderr)
    if result.aggregate is not None:
        from . import plotting
        files = H.emit_plot_data(result.aggregate, result.outdir)
        fig = plotting.training_curve(result.aggregate,
                                      result.outdir / "curve.png",
                                      label=cfg["agent.kind"])
        final = result.aggregate[-1]
        print(f"{len(result.per_seed)} seed(s) finished; "
              f"final iteration score {final[1]:.2f} (std {final[2]:.2f})")
        print(f"aggregate: {result.outdir / 'aggregate.csv'}")
        for path in files:
            print(f"plot data: {path}")
        print(f"figure: {fig}")
    return 0 if result.ok else 2


def _parse_m(raw: str):
    if raw.strip().lower() in ("inf", "infinity"):
        return math.inf
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"--m must be a positive integer or 'inf', got {raw!r}")


def _cmd_exact_verify(args) -> int:
    if args.mdp and args.chain:
        raise ConfigError("--mdp and --chain are mutually exclusive")
    if args.mdp:
        model = M.load_mdp(args.mdp)
        origin = f"loaded from {args.mdp}"
    elif args.chain:
        from .envs import make_chain_mdp
        model = make_chain_mdp(args.chain, args.gamma)
        origin = f"{args.chain}-state chain"
    else:
        model = M.random_mdp(args.states, args.actions, args.gamma,
                             np.random.default_rng(args.mdp_seed))
        origin = (f"random ({args.states} states, {args.actions} actions, "
                  f"seed {args.mdp_seed})")
    if args.iterations < 2:
        raise ConfigError("need at least 2 iterations to verify the relations")

    # explicit per-kind scales win over the --inject-errors shorthand
    shared = args.inject_errors if args.inject_errors is not None else 0.0
    if args.value_noise is None:
        args.value_noise = shared
    if args.policy_noise is None:
        args.policy_noise = shared
    noisy = args.value_noise > 0 or args.policy_noise > 0
    scheme = X.SchemeConfig(
        iterations=args.iterations, m=_parse_m(args.m), rate=args.rate,
        alpha=args.alpha,
        errors=X.RandomErrors(args.value_noise, args.policy_noise)
        if noisy else None,
        error_seed=args.noise_seed)
    trace = X.run_scheme(model, scheme)
    report = X.verify_theorem1(model, trace, tolerance=args.tolerance)

    loss_norms = np.abs(trace.losses).max(axis=1)
    envelope, _ = X.contraction_envelope(trace.alphas[1:], model.gamma,
                                         loss_norms[0])
    outdir = H.resolve_outdir(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)

    rows = np.column_stack([np.arange(1, trace.iterations + 1),
                            trace.alphas[1:], loss_norms[1:], envelope])
    H.write_metrics(outdir / "trace.csv", rows,
                    header="# cpikit exact trace v1",
                    columns=("iteration", "alpha", "loss_sup", "envelope"))
    from . import plotting
    fig = plotting.convergence_curve(rows[:, 0], rows[:, 2], rows[:, 3],
                                     outdir / "convergence.png")

    lines = [
        f"model: {origin}, gamma {model.gamma}",
        (f"scheme: {trace.iterations} iterations, m={args.m}, "
         f"rate={args.rate}, alpha={args.alpha}, "
         f"noise=({args.value_noise}, {args.policy_noise})"),
        (f"relations: residual/distance one-sided, shortfall as equality, "
         f"tolerance {args.tolerance:g}"),
        f"violations: {report.violations}",
        f"max violation: {report.max_violation:.3e}",
        f"min residual slack: {report.residual_slack.min():.3e}",
        f"min distance slack: {report.distance_slack.min():.3e}",
        f"max shortfall deviation: {report.shift_deviation.max():.3e}",
        f"final loss sup-norm: {loss_norms[-1]:.3e}",
        "verdict: PASS" if report.ok else "verdict: FAIL",
    ]
    (outdir / "verify_report.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    print(f"trace: {outdir / 'trace.csv'}")
    print(f"figure: {fig}")
    return 0 if report.ok else 2


def _gradcheck_case(head: str, hidden, batch: int, seed: int) -> float:
    rng = np.random.default_rng(seed)
    obs_dim, n_actions = 5, 3
    net = N.MlpNet((obs_dim, *hidden, n_actions), head=head,
                   seed=seed, dtype=np.float64)
    states = rng.normal(size=(batch, obs_dim))
    if head == "linear":
        actions = rng.integers(n_actions, size=batch)
        targets = rng.normal(size=batch)
        loss_fn = lambda n_: N.q_loss_and_grad(n_, states, actions, targets)
    else:
        raw = rng.uniform(0.1, 1.0, size=(batch, n_actions))
        probs = raw / raw.sum(axis=1, keepdims=True)
        loss_fn = lambda n_: N.pi_loss_and_grad(n_, states, probs)
    return N.finite_diff_check(net, loss_fn, seed=seed)


def _cmd_gradcheck(args) -> int:
    hidden = tuple(int(s) for s in args.hidden.split(",") if s.strip())
    worst = {"linear": 0.0, "softmax": 0.0}
    for head in worst:
        for seed in range(args.seeds):
            err = _gradcheck_case(head, hidden, args.batch, seed)
            worst[head] = max(worst[head], err)
    ok = True
    for head, err in worst.items():
        passed = err < args.threshold
        ok = ok and passed
        name = "value loss " if head == "linear" else "policy loss"
        print(f"{name} ({args.seeds} seeds): max relative error {err:.3e} "
              f"{'PASS' if passed else 'FAIL'} (threshold {args.threshold:g})")
    return 0 if ok else 2


def _cmd_compare(args) -> int:
    agg_a = H.read_aggregate(Path(args.a) / "aggregate.csv")
    agg_b = H.read_aggregate(Path(args.b) / "aggregate.csv")
    gain = H.auc_improvement(agg_a[:, 1], agg_b[:, 1])
    outdir = H.resolve_outdir(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    from . import plotting
    fig = plotting.comparison_curve(agg_a, agg_b, args.label_a, args.label_b,
                                    outdir / "comparison.png")
    summary = (f"relative area-under-curve gain of {args.label_a} "
               f"over {args.label_b}: {gain:+.4f}")
    (outdir / "auc.txt").write_text(summary + "\n")
    for agg, tag in ((agg_a, "a"), (agg_b, "b")):
        rows = np.column_stack([agg[:, 0], agg[:, 1],
                                agg[:, 1] - agg[:, 2], agg[:, 1] + agg[:, 2]])
        H.write_plot_file(outdir / f"score_{tag}.dat",
                          ("iteration", "mean", "lower", "upper"), rows)
    print(summary)
    print(f"figure: {fig}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {
            "train": _cmd_train,
            "exact-verify": _cmd_exact_verify,
            "gradcheck": _cmd_gradcheck,
            "compare": _cmd_compare,
        }[args.command]
        return handler(args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
