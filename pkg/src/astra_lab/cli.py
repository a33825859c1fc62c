"""Command-line pipeline driver.

One subcommand per pipeline stage: collect | pair | augment | ground |
align | train | deploy | compare | ablate | sweep | selftest.  Output
locations default to --out, then the ASTRA_LAB_OUT environment variable,
then ./runs.  Budgets come from a [budgets] section in --config, with
sensible desk-scale defaults.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import data as datamod
from .alignment import TargetEncoder, align, mmd2
from .envs import PAIR_IDS, make_pair
from .evaluation import (
    ABLATION_MODES, METHODS, PipelineConfig, compare_methods, deploy,
    run_ablation, run_data_sweep, run_method, write_report,
)
from .grounding import AstraModel, train_grounding
from .policy import (
    AbstractRollouts, DrConfig, GroundedRollouts, Policy, train_policy,
)


class CliError(Exception):
    pass


def _out_root(args):
    if getattr(args, "out", None):
        return Path(args.out)
    env = os.environ.get("ASTRA_LAB_OUT")
    return Path(env) if env else Path("runs")


def _parse_seeds(spec):
    """'5' means seeds 0..4; '0,3,7' is an explicit list."""
    if "," in spec:
        return [int(s) for s in spec.split(",") if s.strip()]
    return list(range(int(spec)))


def _pipeline_config(args) -> PipelineConfig:
    pc = PipelineConfig()
    if getattr(args, "config", None):
        cfg = cfgmod.load_config(args.config)
        budgets = cfg.get("budgets", {})
        fields = {f.name: f.type for f in dataclasses.fields(PipelineConfig)}
        unknown = [k for k in budgets if k not in fields]
        if unknown:
            raise CliError(f"unknown budget keys {unknown}; "
                           f"known: {sorted(fields)}")
        casts = {"int": int, "float": float}
        kwargs = {k: casts.get(fields[k], int)(v) for k, v in budgets.items()}
        pc = dataclasses.replace(pc, **kwargs)
    return pc


def _load_dataset(path, stage):
    path = Path(path)
    if not path.exists():
        raise CliError(f"missing dataset {path} (produce it with "
                       f"'astra-lab {stage}')")
    return datamod.load_dataset(path)


def _require(path, what, stage):
    path = Path(path)
    if not path.exists():
        raise CliError(f"missing {what} at {path} (produce it with "
                       f"'astra-lab {stage}')")
    return path


def _ensure_paired(dataset, pair):
    if not all(t.paired for t in dataset.trajectories):
        raise CliError("dataset is not paired (run 'astra-lab pair' first)")


# ---------------------------------------------------------------------------
# subcommands

def cmd_collect(args):
    pair = make_pair(args.env)
    policy, policy_id = datamod.default_policy_for(pair)
    ds = datamod.collect(pair, args.n, seed=args.seed, policy=policy,
                         policy_id=policy_id)
    out = Path(args.dataset)
    out.parent.mkdir(parents=True, exist_ok=True)
    datamod.save_dataset(ds, out)
    print(f"collected {len(ds)} trajectories -> {out}")


def cmd_pair(args):
    pair = make_pair(args.env)
    ds = _load_dataset(args.dataset, "collect")
    skipped = datamod.make_paired(ds, pair)
    out = Path(args.output or args.dataset)
    datamod.save_dataset(ds, out)
    print(f"paired {len(ds)} trajectories ({skipped} transitions skipped) "
          f"-> {out}")


def cmd_augment(args):
    pair = make_pair(args.env)
    ds = _load_dataset(args.dataset, "collect")
    out_ds = datamod.augment(ds, pair, args.n, seed=args.seed)
    datamod.make_paired(out_ds, pair)
    out = Path(args.output or args.dataset)
    datamod.save_dataset(out_ds, out)
    print(f"augmented to {len(out_ds)} trajectories -> {out}")


def cmd_ground(args):
    pair = make_pair(args.env)
    ds = _load_dataset(args.dataset, "pair")
    _ensure_paired(ds, pair)
    pc = _pipeline_config(args)
    out = _out_root(args) / args.env / f"ground_{args.mode}" / str(args.seed)
    out.mkdir(parents=True, exist_ok=True)
    model = AstraModel(pair.abstract_dim, pair.action_dim, seed=args.seed)
    train_grounding(model, ds, pair, mode=args.mode, epochs=pc.ground_epochs,
                    patience=pc.ground_patience, window=pc.ground_window,
                    batch_size=pc.ground_batch, seed=args.seed,
                    log_path=out / "grounding.csv")
    model.save(out / "model.ckpt")
    print(f"grounded model ({args.mode}) -> {out / 'model.ckpt'}")


def cmd_align(args):
    pair = make_pair(args.env)
    ds = _load_dataset(args.dataset, "pair")
    model_path = _require(args.model, "grounding checkpoint", "ground")
    model = AstraModel(pair.abstract_dim, pair.action_dim, seed=args.seed)
    model.load(model_path)
    pc = _pipeline_config(args)
    out = model_path.parent
    encoder = TargetEncoder(pair.target_dim, pair.action_dim, seed=args.seed)
    encoder.warm_start(model, ds)
    align(encoder, model, ds, pair, epochs=pc.align_epochs,
          batch_size=pc.align_batch_size, batches_per_epoch=pc.align_batches,
          seed=args.seed, log_path=out / "alignment.csv")
    encoder.save(out / "encoder.ckpt")
    print(f"aligned target encoder -> {out / 'encoder.ckpt'}")


def cmd_train(args):
    pair = make_pair(args.env)
    pc = _pipeline_config(args)
    out = _out_root(args) / args.env / args.method / str(args.seed)
    out.mkdir(parents=True, exist_ok=True)
    if args.method in ("dt", "dr"):
        policy = Policy(pair.abstract_dim, pair.action_dim, seed=args.seed,
                        recurrent=True)
        dr = DrConfig() if args.method == "dr" else None
        source = AbstractRollouts(pair, n_envs=pc.n_envs, dr=dr,
                                  seed=args.seed)
    else:
        model_path = _require(args.model, "grounding checkpoint", "ground")
        model = AstraModel(pair.abstract_dim, pair.action_dim,
                           seed=args.seed)
        model.load(model_path)
        reward_source = "env" if args.method == "nas" else "pred"
        policy = Policy(model.latent_dim, pair.action_dim, seed=args.seed,
                        recurrent=False)
        source = GroundedRollouts(pair, model, n_envs=pc.n_envs,
                                  reward_source=reward_source,
                                  seed=args.seed)
    train_policy(policy, source, pc.ppo(), pc.ppo_iters, seed=args.seed,
                 log_path=out / "curves.csv")
    policy.save(out / "policy.ckpt")
    print(f"trained {args.method} policy -> {out / 'policy.ckpt'}")


def cmd_deploy(args):
    pair = make_pair(args.env)
    run_dir = _require(args.run_dir, "run directory", "train")
    policy_path = _require(run_dir / "policy.ckpt", "policy checkpoint",
                           "train")
    encoder = None
    if args.method in ("dt", "dr"):
        policy = Policy(pair.abstract_dim, pair.action_dim, seed=0,
                        recurrent=True)
    else:
        enc_path = _require(run_dir / "encoder.ckpt", "encoder checkpoint",
                            "align")
        encoder = TargetEncoder(pair.target_dim, pair.action_dim, seed=0)
        encoder.load(enc_path)
        policy = Policy(encoder.latent_dim, pair.action_dim, seed=0,
                        recurrent=False)
    policy.load(policy_path)
    report = deploy(pair, policy, args.episodes, seed=args.seed,
                    encoder=encoder, method=args.method)
    write_report([report], run_dir / "report.csv")
    print(f"success {report.success_rate:.3f} "
          f"[{report.ci_low:.3f}, {report.ci_high:.3f}] over "
          f"{report.episodes} episodes -> {run_dir / 'report.csv'}")


def _comparison_dataset(args, pair):
    if args.dataset:
        ds = _load_dataset(args.dataset, "pair")
        _ensure_paired(ds, pair)
        return ds
    policy, policy_id = datamod.default_policy_for(pair)
    ds = datamod.collect(pair, args.n_traj, seed=args.data_seed,
                         policy=policy, policy_id=policy_id)
    datamod.make_paired(ds, pair)
    return ds


def cmd_compare(args):
    pair = make_pair(args.env)
    ds = _comparison_dataset(args, pair)
    reports = compare_methods(pair, args.methods.split(","),
                              _parse_seeds(args.seeds), ds,
                              out_root=_out_root(args),
                              pc=_pipeline_config(args), jobs=args.jobs)
    _print_reports(reports)


def cmd_ablate(args):
    pair = make_pair(args.env)
    ds = _comparison_dataset(args, pair)
    reports = run_ablation(pair, args.modes.split(","),
                           _parse_seeds(args.seeds), ds,
                           out_root=_out_root(args),
                           pc=_pipeline_config(args), jobs=args.jobs)
    _print_reports(reports)


def cmd_sweep(args):
    pair = make_pair(args.env)
    fractions = [float(f) for f in args.fractions.split(",")]
    baseline = args.baseline
    need = int(round(max(fractions) * baseline))
    if args.dataset:
        pool = _load_dataset(args.dataset, "pair")
        _ensure_paired(pool, pair)
    else:
        policy, policy_id = datamod.default_policy_for(pair)
        pool = datamod.collect(pair, need, seed=args.data_seed,
                               policy=policy, policy_id=policy_id)
        datamod.make_paired(pool, pair)
    if len(pool) < need:
        raise CliError(f"sweep needs {need} trajectories "
                       f"(max fraction x baseline), pool has {len(pool)}")
    fracs, reports, curve = run_data_sweep(
        pair, fractions, _parse_seeds(args.seeds), pool, baseline,
        out_root=_out_root(args), pc=_pipeline_config(args), jobs=args.jobs)
    for row in curve:
        print(f"fraction {row['fraction']:.2f}: "
              f"success {row['mean_success']:.3f} +- {row['std_success']:.3f}"
              f" ({row['n_seeds']} seeds)")


def _print_reports(reports):
    for r in reports:
        status = "FAILED" if r.failed else f"success {r.success_rate:.3f}"
        print(f"{r.method:>16} seed {r.seed}: {status}")


def cmd_selftest(args):
    from .numerics import Parameter, check_gradients
    from .numerics import ops as O

    checks = []

    def check(name, fn):
        try:
            fn()
            checks.append((name, True, ""))
        except Exception as exc:            # report, don't abort
            checks.append((name, False, f"{type(exc).__name__}: {exc}"))

    def gradient_probe():
        rng = np.random.default_rng(0)
        p = Parameter(rng.normal(size=(4, 3)), "p")
        err = check_gradients(
            lambda: O.sum(O.tanh(O.matmul(O.leaf(p), rng_mat))), [p])
        assert err <= 1e-6, err

    rng_mat = np.random.default_rng(1).normal(size=(3, 2))

    def mmd_probe():
        rng = np.random.default_rng(2)
        x = rng.normal(size=(6, 2))
        assert float(mmd2(x, x.copy(), [1.0]).value) == 0.0
        a, b = rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
        d2 = float(((a - b) ** 2).sum())
        want = 2 - 2 * np.exp(-d2 / 2.0)
        assert abs(float(mmd2(a, b, [1.0]).value) - want) < 1e-12

    def env_probe():
        pair = make_pair("unicycle_umaze")
        env = pair.make_abstract()
        env.reset(0)
        env.set_state([0.5, 0.6, 0.0, 0.0])
        _, _, done, info = env.step([0.0, 1.0])
        assert not done and not info["collision"]

    def pairing_probe():
        pair = make_pair("lagcart")
        ds = datamod.collect(pair, 2, seed=0)
        datamod.make_paired(ds, pair)
        for traj in ds.trajectories:
            assert np.array_equal(datamod.replay_paired(traj, pair),
                                  traj.abs_next_sim)

    check("gradient oracle", gradient_probe)
    check("mmd closed forms", mmd_probe)
    check("maze env sanity", env_probe)
    check("pairing replay", pairing_probe)
    width = max(len(n) for n, _, _ in checks)
    failed = False
    for name, ok, msg in checks:
        print(f"{name:<{width}}  {'PASS' if ok else 'FAIL'}  {msg}")
        failed = failed or not ok
    if failed:
        raise CliError("selftest failed")


# ---------------------------------------------------------------------------
# parser

def build_parser():
    parser = argparse.ArgumentParser(
        prog="astra-lab",
        description="Grounded abstract-simulator sim2real laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **_):
        p = sub.add_parser(name)
        p.set_defaults(fn=fn)
        p.add_argument("--config", help="run config file (key=value)")
        p.add_argument("--out", help="output root (default $ASTRA_LAB_OUT "
                                     "or ./runs)")
        return p

    p = add("collect", cmd_collect)
    p.add_argument("--env", required=True, choices=PAIR_IDS)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dataset", required=True, help="output dataset path")

    for name, fn in (("pair", cmd_pair), ("augment", cmd_augment)):
        p = add(name, fn)
        p.add_argument("--env", required=True, choices=PAIR_IDS)
        p.add_argument("--dataset", required=True)
        p.add_argument("--output", help="defaults to --dataset (in place)")
        if name == "augment":
            p.add_argument("--n", type=int, required=True)
            p.add_argument("--seed", type=int, default=0)

    p = add("ground", cmd_ground)
    p.add_argument("--env", required=True, choices=PAIR_IDS)
    p.add_argument("--dataset", required=True)
    p.add_argument("--mode", default="full",
                   choices=("full", "no_trans", "no_rew", "nas"))
    p.add_argument("--seed", type=int, default=0)

    p = add("align", cmd_align)
    p.add_argument("--env", required=True, choices=PAIR_IDS)
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", required=True, help="grounding checkpoint")
    p.add_argument("--seed", type=int, default=0)

    p = add("train", cmd_train)
    p.add_argument("--env", required=True, choices=PAIR_IDS)
    p.add_argument("--method", required=True,
                   choices=METHODS + ("astra_no_trans", "astra_no_rew"))
    p.add_argument("--model", help="grounding checkpoint (grounded methods)")
    p.add_argument("--seed", type=int, default=0)

    p = add("deploy", cmd_deploy)
    p.add_argument("--env", required=True, choices=PAIR_IDS)
    p.add_argument("--method", required=True,
                   choices=METHODS + ("astra_no_trans", "astra_no_rew"))
    p.add_argument("--run-dir", required=True)
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)

    for name, fn in (("compare", cmd_compare), ("ablate", cmd_ablate)):
        p = add(name, fn)
        p.add_argument("--env", required=True, choices=PAIR_IDS)
        p.add_argument("--seeds", default="5")
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--dataset", help="paired dataset (collected if "
                                         "omitted)")
        p.add_argument("--n-traj", type=int, default=200)
        p.add_argument("--data-seed", type=int, default=0)
        if name == "compare":
            p.add_argument("--methods", default=",".join(METHODS))
        else:
            p.add_argument("--modes", default=",".join(ABLATION_MODES))

    p = add("sweep", cmd_sweep)
    p.add_argument("--env", required=True, choices=PAIR_IDS)
    p.add_argument("--fractions", default="0.25,0.5,0.75,1.0,1.25,1.5")
    p.add_argument("--baseline", type=int, default=200)
    p.add_argument("--seeds", default="5")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--dataset")
    p.add_argument("--data-seed", type=int, default=0)

    add("selftest", cmd_selftest)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (IOError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
